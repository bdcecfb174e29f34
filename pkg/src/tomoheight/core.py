"""Domain types shared by the whole pipeline.

A scene is a multi-polarization tomographic intensity cube over an
(azimuth, range, height-bin) grid plus a LiDAR-derived canopy height map on
the matching (azimuth, range) grid.  Intensities are stored in linear power
(never dB; the dB transform is an explicit preprocessing option) so that
stored cubes are non-negative by construction.  The height axis is stored
as explicit bin centers rather than implied by a vertical resolution.

All types here are treated as immutable value objects after construction
and are safe to share across concurrent readers.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum, IntEnum
from types import MappingProxyType

import numpy as np

from .errors import InvariantViolationError


class BandId(Enum):
    """SAR frequency band of a tomographic acquisition."""

    P = "P"
    LMono = "L-mono"
    LBi = "L-bi"


class Polarization(Enum):
    HH = "HH"
    HV = "HV"
    VV = "VV"


#: The "union" configuration: all three polarization channels together.
UNION_POLS: tuple[Polarization, ...] = (
    Polarization.HH,
    Polarization.HV,
    Polarization.VV,
)


@dataclass(frozen=True)
class BandMeta:
    band: BandId
    wavelength_m: float
    slant_range_res_m: float
    azimuth_res_m: float
    vertical_res_m: float
    num_passes: int

    def __post_init__(self):
        if min(self.slant_range_res_m, self.azimuth_res_m, self.vertical_res_m) <= 0:
            raise ValueError("band resolutions must be positive")


_REGISTRY = MappingProxyType({
    BandId.P: BandMeta(BandId.P, wavelength_m=0.69, slant_range_res_m=5.0,
                       azimuth_res_m=1.0, vertical_res_m=3.0, num_passes=28),
    BandId.LMono: BandMeta(BandId.LMono, wavelength_m=0.22, slant_range_res_m=3.0,
                           azimuth_res_m=0.55, vertical_res_m=1.3, num_passes=30),
    BandId.LBi: BandMeta(BandId.LBi, wavelength_m=0.22, slant_range_res_m=3.0,
                         azimuth_res_m=0.55, vertical_res_m=2.3, num_passes=30),
})


def band_registry():
    """Return the immutable map of every band's acquisition metadata."""
    return _REGISTRY


class SplitLabel(IntEnum):
    """Per-pixel role in a geographic split; values match the .smap encoding."""

    Train = 0
    Val = 1
    Test = 2
    Excluded = 255


_VALID_LABELS = frozenset(int(lbl) for lbl in SplitLabel)


@dataclass(frozen=True)
class TomoCube:
    """Multi-polarization 3D intensity volume.

    ``intensity`` is indexed ``[pol][x][y][z]`` (azimuth, range, height bin)
    in linear power, float32.  ``z_centers_m`` holds the height-bin centers
    in meters, strictly increasing with uniform spacing.
    """

    band: BandId
    pols: tuple[Polarization, ...]
    z_centers_m: np.ndarray
    intensity: np.ndarray
    az_spacing_m: float = 1.0
    rng_spacing_m: float = 1.0

    @property
    def nx(self) -> int:
        return self.intensity.shape[1]

    @property
    def ny(self) -> int:
        return self.intensity.shape[2]

    @property
    def nz(self) -> int:
        return self.intensity.shape[3]


@dataclass(frozen=True)
class CanopyHeightMap:
    """LiDAR-derived canopy top height grid; NaN marks nodata pixels."""

    heights_m: np.ndarray
    az_spacing_m: float = 1.0
    rng_spacing_m: float = 1.0

    @property
    def nx(self) -> int:
        return self.heights_m.shape[0]

    @property
    def ny(self) -> int:
        return self.heights_m.shape[1]

    @property
    def nodata(self) -> np.ndarray:
        return np.isnan(self.heights_m)


@dataclass(frozen=True)
class SplitAssignment:
    """Per-pixel split label grid over (azimuth, range)."""

    labels: np.ndarray  # uint8 grid of SplitLabel values

    @property
    def nx(self) -> int:
        return self.labels.shape[0]

    @property
    def ny(self) -> int:
        return self.labels.shape[1]

    def mask(self, label: SplitLabel) -> np.ndarray:
        return self.labels == int(label)

    def counts(self) -> dict[SplitLabel, int]:
        return {lbl: int(np.count_nonzero(self.labels == int(lbl)))
                for lbl in SplitLabel}


@dataclass(frozen=True)
class MetricsReport:
    """Evaluation summary for one (band, pols, split) combination."""

    mae_m: float
    rmse_m: float
    r2: float
    normalized_mae: float
    n_samples: int
    split: SplitLabel
    band: BandId | None = None
    pols: tuple[Polarization, ...] = field(default=())

    def __post_init__(self):
        if self.n_samples <= 0:
            raise ValueError("n_samples must be positive")
        if self.mae_m < 0:
            raise ValueError("mae must be non-negative")
        # float32 forward passes can leave rmse a hair under mae
        if self.rmse_m < self.mae_m - 1e-9 * max(1.0, self.mae_m):
            raise ValueError("rmse must be >= mae")
        if np.isfinite(self.r2) and self.r2 > 1 + 1e-12:
            raise ValueError("r2 cannot exceed 1")


def validate_cube(cube: TomoCube) -> str | None:
    """Check every TomoCube invariant; return the first violated one by name.

    Returns None for a well-formed cube.  Check order: DimensionMismatch,
    NonMonotoneZAxis, NonFiniteIntensity, NegativeIntensity.
    """
    if len(cube.pols) == 0 or len(set(cube.pols)) != len(cube.pols):
        return "DimensionMismatch"
    if cube.intensity.ndim != 4 or cube.intensity.shape[0] != len(cube.pols):
        return "DimensionMismatch"
    if cube.nx < 1 or cube.ny < 1 or cube.nz < 1:
        return "DimensionMismatch"
    z = np.asarray(cube.z_centers_m, dtype=np.float64)
    if z.ndim != 1 or z.shape[0] != cube.nz:
        return "DimensionMismatch"
    if cube.nz > 1:
        dz = np.diff(z)
        if np.any(dz <= 0):
            return "NonMonotoneZAxis"
        if np.max(np.abs(dz - dz[0])) > 1e-6 * abs(dz[0]):
            return "NonMonotoneZAxis"
    if not np.all(np.isfinite(cube.intensity)):
        return "NonFiniteIntensity"
    if np.any(cube.intensity < 0):
        return "NegativeIntensity"
    return None


def check_cube(cube: TomoCube) -> TomoCube:
    """Raise InvariantViolationError unless the cube is well-formed."""
    violation = validate_cube(cube)
    if violation is not None:
        raise InvariantViolationError(violation)
    return cube


def validate_chm(chm: CanopyHeightMap) -> str | None:
    """Check CanopyHeightMap invariants; NaN encodes nodata and is legal."""
    h = chm.heights_m
    if h.ndim != 2 or h.shape[0] < 1 or h.shape[1] < 1:
        return "DimensionMismatch"
    valid = ~np.isnan(h)
    if np.any(np.isinf(h[valid])):
        return "NonFiniteHeight"
    if np.any(h[valid] < 0):
        return "NegativeHeight"
    return None


def check_chm(chm: CanopyHeightMap) -> CanopyHeightMap:
    violation = validate_chm(chm)
    if violation is not None:
        raise InvariantViolationError(violation)
    return chm


def validate_split(assignment: SplitAssignment) -> str | None:
    g = assignment.labels
    if g.ndim != 2 or g.shape[0] < 1 or g.shape[1] < 1:
        return "DimensionMismatch"
    if not set(np.unique(g).tolist()) <= _VALID_LABELS:
        return "BadLabelValue"
    return None


def check_split(assignment: SplitAssignment) -> SplitAssignment:
    violation = validate_split(assignment)
    if violation is not None:
        raise InvariantViolationError(violation)
    return assignment


def parse_pols(text: str) -> tuple[Polarization, ...]:
    """Parse a "HH+HV+VV" style polarization list (also accepts commas)."""
    parts = [p for p in text.replace(",", "+").split("+") if p]
    pols = tuple(Polarization(p.strip().upper()) for p in parts)
    if len(pols) == 0 or len(set(pols)) != len(pols):
        raise ValueError(f"invalid polarization set: {text!r}")
    return pols


def pols_to_str(pols: tuple[Polarization, ...]) -> str:
    return "+".join(p.value for p in pols)
