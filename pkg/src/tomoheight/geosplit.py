"""Geographic train/val/test splitting and spatial-leakage auditing.

Three strategies over the (azimuth, range) pixel grid:

* Swath: contiguous full-width bands stacked along one axis, boundaries at
  floor(ratio * extent).
* Square: one axis-aligned test rectangle (and a second for val when the
  val ratio is positive) carved out of an all-train scene.
* Quadrant: the scene cut at (nx//2, ny//2) into four quadrants, each
  assigned a whole label.  An exact-ratio mode rebalances the val/test
  quadrant pair by moving a strip of rows between them so uneven targets
  like 50/30/20 are met.

Pixel convention: x (first axis) indexes azimuth rows, y indexes range
columns; quadrant NW is low-x/low-y.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .core import SplitAssignment, SplitLabel
from .errors import BadSpecError, DegenerateSplitError, TooSmallError


class SplitStrategy(Enum):
    Swath = "swath"
    Square = "square"
    Quadrant = "quadrant"


class SwathOrientation(Enum):
    #: Bands span the full range axis and are stacked along azimuth (x).
    AlongRange = "along_range"
    #: Bands span the full azimuth axis and are stacked along range (y).
    AlongAzimuth = "along_azimuth"


class Quadrant(Enum):
    NW = "NW"
    NE = "NE"
    SW = "SW"
    SE = "SE"


_QUADRANT_ORDER = (Quadrant.NW, Quadrant.NE, Quadrant.SW, Quadrant.SE)


@dataclass(frozen=True)
class SplitSpec:
    strategy: SplitStrategy
    ratios: tuple[float, float, float]  # (train, val, test)
    orientation: SwathOrientation = SwathOrientation.AlongRange
    test_origin: tuple[int, int] | str = "centered"
    quadrant_roles: dict[Quadrant, SplitLabel] | None = None
    exact_quadrant_ratios: bool = False
    seed: int = 0

    def __post_init__(self):
        train, val, test = self.ratios
        # val may be zero (80/20 and 75/25 layouts have no val region)
        if not (0 < train < 1 and 0 < test < 1 and 0 <= val < 1):
            raise BadSpecError(f"ratios out of range: {self.ratios}")
        if abs(train + val + test - 1.0) > 1e-9:
            raise BadSpecError(f"ratios must sum to 1: {self.ratios}")
        if self.quadrant_roles is not None:
            if set(self.quadrant_roles) != set(_QUADRANT_ORDER):
                raise BadSpecError("quadrant_roles must assign all four quadrants")


def make_split(nx: int, ny: int, spec: SplitSpec) -> SplitAssignment:
    if nx < 4 or ny < 4:
        raise TooSmallError(f"grid ({nx}, {ny}) below the 4x4 minimum")
    if spec.strategy is SplitStrategy.Swath:
        labels = _swath(nx, ny, spec)
    elif spec.strategy is SplitStrategy.Square:
        labels = _square(nx, ny, spec)
    else:
        labels = _quadrant(nx, ny, spec)
    assignment = SplitAssignment(labels=labels)
    counts = assignment.counts()
    if counts[SplitLabel.Train] == 0 or counts[SplitLabel.Test] == 0:
        raise TooSmallError("split leaves train or test empty")
    return assignment


def _swath(nx: int, ny: int, spec: SplitSpec) -> np.ndarray:
    train, val, _ = spec.ratios
    axis = 0 if spec.orientation is SwathOrientation.AlongRange else 1
    extent = nx if axis == 0 else ny
    b1 = int(math.floor(train * extent))
    b2 = int(math.floor((train + val) * extent))
    if b1 == 0 or b2 >= extent or (val > 0 and b2 == b1):
        raise TooSmallError("swath ratios yield an empty band")
    line = np.full(extent, int(SplitLabel.Test), dtype=np.uint8)
    line[:b1] = int(SplitLabel.Train)
    line[b1:b2] = int(SplitLabel.Val)
    if axis == 0:
        return np.repeat(line[:, None], ny, axis=1)
    return np.repeat(line[None, :], nx, axis=0)


def _rect_dims(nx: int, ny: int, ratio: float) -> tuple[int, int]:
    # Scale both sides by sqrt(ratio) so area tracks ratio * nx * ny.
    side = math.sqrt(ratio)
    sx = min(nx, max(1, round(nx * side)))
    sy = min(ny, max(1, round(ny * side)))
    return sx, sy


def _square(nx: int, ny: int, spec: SplitSpec) -> np.ndarray:
    _, val, test = spec.ratios
    labels = np.full((nx, ny), int(SplitLabel.Train), dtype=np.uint8)

    sx, sy = _rect_dims(nx, ny, test)
    if spec.test_origin == "centered":
        ox, oy = (nx - sx) // 2, (ny - sy) // 2
    else:
        ox, oy = spec.test_origin
        if not (0 <= ox <= nx - sx and 0 <= oy <= ny - sy):
            raise BadSpecError(f"test_origin {spec.test_origin} does not fit")
    labels[ox:ox + sx, oy:oy + sy] = int(SplitLabel.Test)

    if val > 0:
        target = val * nx * ny
        rect = _fit_val_rect(nx, ny, target, (ox, oy, sx, sy))
        if rect is None:
            raise TooSmallError("no room for a val rectangle next to the test rectangle")
        ax, ay, vx, vy = rect
        labels[ax:ax + vx, ay:ay + vy] = int(SplitLabel.Val)
    return labels


def _fit_val_rect(nx, ny, target_area, occupied):
    """Val rectangle of ~target_area inside one of the free margin bands
    around the occupied test rectangle (top, bottom, left, right order).

    The rectangle's aspect adapts to the band so a centered test square
    still leaves room; returns (ax, ay, vx, vy) or None."""
    ox, oy, sx, sy = occupied
    bands = [
        (0, 0, ox, ny),                      # rows above the test rect
        (ox + sx, 0, nx - ox - sx, ny),      # rows below
        (0, 0, nx, oy),                      # columns left
        (0, oy + sy, nx, ny - oy - sy),      # columns right
    ]
    for bx, by, bh, bw in bands:
        if bh < 1 or bw < 1 or bh * bw < target_area:
            continue
        vy = min(bw, max(1, math.ceil(target_area / bh)))
        vx = min(bh, max(1, round(target_area / vy)))
        return bx, by, vx, vy
    return None


def _quadrant_masks(nx: int, ny: int) -> dict[Quadrant, tuple[slice, slice]]:
    cx, cy = nx // 2, ny // 2
    return {
        Quadrant.NW: (slice(0, cx), slice(0, cy)),
        Quadrant.NE: (slice(0, cx), slice(cy, ny)),
        Quadrant.SW: (slice(cx, nx), slice(0, cy)),
        Quadrant.SE: (slice(cx, nx), slice(cy, ny)),
    }


def default_quadrant_roles(ratios: tuple[float, float, float]) -> dict[Quadrant, SplitLabel]:
    """Derive whole-quadrant roles from ratios (each rounded to quarters).

    Quadrants are consumed in NW, NE, SW, SE order: train first, then val,
    then test.  75/0/25 gives three train quadrants and one test quadrant;
    50/25/25 (and 50/30/20 before exact rebalancing) gives 2/1/1.
    """
    train, val, test = ratios
    n_train = round(train * 4)
    n_val = round(val * 4)
    n_test = 4 - n_train - n_val
    if n_train < 1 or n_test < 1 or n_val < 0:
        raise BadSpecError(f"ratios {ratios} cannot be mapped onto four quadrants")
    roles = {}
    order = iter(_QUADRANT_ORDER)
    for _ in range(n_train):
        roles[next(order)] = SplitLabel.Train
    for _ in range(n_val):
        roles[next(order)] = SplitLabel.Val
    for _ in range(n_test):
        roles[next(order)] = SplitLabel.Test
    return roles


def _quadrant(nx: int, ny: int, spec: SplitSpec) -> np.ndarray:
    roles = spec.quadrant_roles or default_quadrant_roles(spec.ratios)
    labels = np.empty((nx, ny), dtype=np.uint8)
    masks = _quadrant_masks(nx, ny)
    for quad, (sx, sy) in masks.items():
        labels[sx, sy] = int(roles[quad])

    if spec.exact_quadrant_ratios:
        _rebalance_val_test(labels, masks, roles, spec.ratios, nx, ny)
    return labels


def _rebalance_val_test(labels, masks, roles, ratios, nx, ny) -> None:
    """Move a row-major strip between the val and test quadrants so their
    pixel counts match the requested ratios (quadrants only provide quarters)."""
    val_quads = [q for q, lbl in roles.items() if lbl is SplitLabel.Val]
    test_quads = [q for q, lbl in roles.items() if lbl is SplitLabel.Test]
    if len(val_quads) != 1 or len(test_quads) != 1:
        raise BadSpecError("exact_quadrant_ratios needs exactly one val and one test quadrant")
    total = nx * ny
    _, val_ratio, _ = ratios
    current_val = int(np.count_nonzero(labels == int(SplitLabel.Val)))
    deficit = int(round(val_ratio * total)) - current_val
    if deficit == 0:
        return
    if deficit > 0:
        src, dst = test_quads[0], SplitLabel.Val
    else:
        src, dst = val_quads[0], SplitLabel.Test
    sx, sy = masks[src]
    block = labels[sx, sy]  # view into the label grid
    k = min(abs(deficit), block.size - 1)  # keep the source quadrant non-empty
    width = block.shape[1]
    rows, rem = divmod(k, width)
    if rows:
        block[:rows, :] = int(dst)
    if rem:
        block[rows, :rem] = int(dst)


@dataclass(frozen=True)
class LeakageReport:
    """Spatial-adjacency audit of a split assignment."""

    disjoint: bool
    test_near_train: dict[int, int]  # Chebyshev distance -> count of test pixels
    boundary_edges: int
    n_train: int
    n_test: int


_LEAKAGE_DISTANCES = (1, 2, 4, 8)


def _dilate_chebyshev(mask: np.ndarray) -> np.ndarray:
    """One step of 3x3 (Chebyshev ball radius 1) binary dilation."""
    out = mask.copy()
    out[1:, :] |= mask[:-1, :]
    out[:-1, :] |= mask[1:, :]
    out[:, 1:] |= mask[:, :-1]
    out[:, :-1] |= mask[:, 1:]
    out[1:, 1:] |= mask[:-1, :-1]
    out[1:, :-1] |= mask[:-1, 1:]
    out[:-1, 1:] |= mask[1:, :-1]
    out[:-1, :-1] |= mask[1:, 1:]
    return out


def leakage_report(assignment: SplitAssignment) -> LeakageReport:
    """Quantify how close test pixels sit to training data.

    Reports, for Chebyshev distances d in {1, 2, 4, 8}, how many test pixels
    have a train pixel within d, plus the length of the direct train/test
    boundary in pixel edges.
    """
    train = assignment.mask(SplitLabel.Train)
    test = assignment.mask(SplitLabel.Test)
    n_train = int(np.count_nonzero(train))
    n_test = int(np.count_nonzero(test))
    if n_train == 0 or n_test == 0:
        raise DegenerateSplitError("assignment lacks train or test pixels")

    near = {}
    dilated = train
    steps = 0
    for d in _LEAKAGE_DISTANCES:
        while steps < d:
            dilated = _dilate_chebyshev(dilated)
            steps += 1
        near[d] = int(np.count_nonzero(test & dilated))

    g = assignment.labels
    horiz = ((g[:, :-1] == int(SplitLabel.Train)) & (g[:, 1:] == int(SplitLabel.Test)))
    horiz |= ((g[:, :-1] == int(SplitLabel.Test)) & (g[:, 1:] == int(SplitLabel.Train)))
    vert = ((g[:-1, :] == int(SplitLabel.Train)) & (g[1:, :] == int(SplitLabel.Test)))
    vert |= ((g[:-1, :] == int(SplitLabel.Test)) & (g[1:, :] == int(SplitLabel.Train)))
    boundary = int(np.count_nonzero(horiz) + np.count_nonzero(vert))

    return LeakageReport(disjoint=True, test_near_train=near,
                         boundary_edges=boundary, n_train=n_train, n_test=n_test)


def split_pixel_table(assignment: SplitAssignment) -> dict[SplitLabel, np.ndarray]:
    """Row-major flat pixel indices per label (exhaustive, disjoint)."""
    flat = assignment.labels.reshape(-1)
    return {lbl: np.flatnonzero(flat == int(lbl)) for lbl in SplitLabel}
