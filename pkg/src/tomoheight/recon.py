"""Full-scene height reconstruction and cross-band comparison reports.

Reconstruction tiles the whole scene with W x W windows at a configurable
stride, ignoring split labels, and averages overlapping patch predictions
per pixel (uniform weights).  Pixels in the right/bottom margin that no
full window covers are flagged uncovered rather than padded; stride = W
reproduces disjoint stitching exactly.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .core import (
    BandId,
    CanopyHeightMap,
    MetricsReport,
    Polarization,
    SplitLabel,
    band_registry,
    pols_to_str,
)
from .errors import DimensionMismatchError, ShapeMismatchError
from .fileio import AlignedScene
from .metrics import MinMaxScaler, compute_report, normalized_mae
from .trainer import scene_channels
from .volnet import ForwardCtx, UNet3dRegressor


@dataclass(frozen=True)
class ReconMap:
    heights_m: np.ndarray   # (nx, ny), NaN where uncovered
    coverage: np.ndarray    # (nx, ny) int contribution counts
    uncovered: np.ndarray   # (nx, ny) bool
    band: BandId
    pols: tuple[Polarization, ...]
    patch_w: int
    stride: int

    @property
    def overlapping(self) -> bool:
        return self.stride < self.patch_w


def reconstruct(model: UNet3dRegressor, scene: AlignedScene, w: int, stride: int,
                scaler: MinMaxScaler, use_db: bool = False,
                batch_size: int = 16) -> ReconMap:
    if model.spec.in_channels != len(scene.cube.pols):
        raise ShapeMismatchError(
            f"model expects {model.spec.in_channels} channels, "
            f"scene has {len(scene.cube.pols)} pols")
    if not (1 <= stride <= w):
        raise ShapeMismatchError("stride must be in [1, w]")
    nx, ny = scene.nx, scene.ny
    channels = scaler.transform(scene_channels(scene, tuple(scene.cube.pols), use_db))

    origins = [(x, y)
               for x in range(0, nx - w + 1, stride)
               for y in range(0, ny - w + 1, stride)]
    total = np.zeros((nx, ny), dtype=np.float64)
    count = np.zeros((nx, ny), dtype=np.int64)
    ctx = ForwardCtx(train=False)
    for start in range(0, len(origins), batch_size):
        chunk = origins[start:start + batch_size]
        batch = np.stack([channels[:, x:x + w, y:y + w, :] for x, y in chunk])
        preds = model.forward(batch, ctx)
        for (x, y), pred in zip(chunk, preds):
            total[x:x + w, y:y + w] += pred
            count[x:x + w, y:y + w] += 1

    uncovered = count == 0
    heights = np.full((nx, ny), np.nan)
    np.divide(total, count, out=heights, where=~uncovered)
    return ReconMap(heights_m=heights, coverage=count, uncovered=uncovered,
                    band=scene.cube.band, pols=tuple(scene.cube.pols),
                    patch_w=w, stride=stride)


def error_map(recon: ReconMap, chm: CanopyHeightMap) -> tuple[np.ndarray, MetricsReport]:
    """Signed per-pixel error (pred - truth) over covered, non-nodata pixels,
    with a metrics report aggregated over the same set."""
    if recon.heights_m.shape != chm.heights_m.shape:
        raise DimensionMismatchError(
            f"recon {recon.heights_m.shape} vs chm {chm.heights_m.shape}")
    valid = ~recon.uncovered & ~chm.nodata
    err = np.full(recon.heights_m.shape, np.nan)
    err[valid] = recon.heights_m[valid] - chm.heights_m[valid].astype(np.float64)
    report = compute_report(recon.heights_m[valid],
                            chm.heights_m[valid].astype(np.float64),
                            SplitLabel.Test, recon.band, recon.pols)
    return err, report


@dataclass(frozen=True)
class BandRow:
    band: BandId
    pols: tuple[Polarization, ...]
    val_mae: float
    test_mae: float
    norm_test_mae: float
    test_r2: float


def band_report(reports: list[MetricsReport]) -> list[BandRow]:
    """Cross-band comparison rows from per-split reports.

    Groups input reports by (band, pols), pairs each group's Val and Test
    entries, and recomputes normalized MAE from the raw test MAE and the
    band registry (input normalization values are never trusted).  Rows are
    sorted by band then polarization set.
    """
    if len(reports) == 0:
        raise DimensionMismatchError("band_report needs at least one report")
    groups: dict[tuple, dict] = {}
    for r in reports:
        if r.band is None:
            raise DimensionMismatchError("band_report needs band-tagged reports")
        key = (r.band, tuple(r.pols))
        groups.setdefault(key, {})[r.split] = r

    band_order = {b: i for i, b in enumerate(BandId)}
    pol_order = {p: i for i, p in enumerate(Polarization)}
    rows = []
    for (band, pols), by_split in sorted(
            groups.items(),
            key=lambda kv: (band_order[kv[0][0]],
                            tuple(pol_order[p] for p in kv[0][1]))):
        test = by_split.get(SplitLabel.Test)
        val = by_split.get(SplitLabel.Val)
        if test is None:
            continue
        rows.append(BandRow(
            band=band, pols=pols,
            val_mae=val.mae_m if val is not None else float("nan"),
            test_mae=test.mae_m,
            norm_test_mae=normalized_mae(test.mae_m, band),
            test_r2=test.r2))
    return rows


def write_band_report_csv(rows: list[BandRow], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["band", "pol", "val_mae", "test_mae",
                         "norm_test_mae", "test_r2"])
        for r in rows:
            writer.writerow([r.band.value, pols_to_str(r.pols),
                             repr(r.val_mae), repr(r.test_mae),
                             repr(r.norm_test_mae), repr(r.test_r2)])


#: Fixed linear gray mapping for heatmaps: 0-40 m -> 0-255.
PGM_RANGE_M = (0.0, 40.0)


def write_pgm(grid: np.ndarray, path, lo: float = PGM_RANGE_M[0],
              hi: float = PGM_RANGE_M[1]) -> None:
    """8-bit P5 heatmap with a fixed value mapping; NaN renders as 0.

    A sidecar `<stem>_mask.pgm` records validity (255 = valid pixel) so
    zeros from genuine lows and zeros from nodata stay distinguishable.
    """
    g = np.asarray(grid, dtype=np.float64)
    valid = np.isfinite(g)
    scaled = np.zeros(g.shape, dtype=np.uint8)
    span = hi - lo
    scaled[valid] = np.clip((g[valid] - lo) / span * 255.0, 0, 255).astype(np.uint8)
    _write_p5(scaled, path)
    mask = np.where(valid, 255, 0).astype(np.uint8)
    p = str(path)
    stem = p[:-4] if p.endswith(".pgm") else p
    _write_p5(mask, stem + "_mask.pgm")


def _write_p5(img: np.ndarray, path) -> None:
    # rows = azimuth (x), columns = range (y)
    header = f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(img).tobytes())
