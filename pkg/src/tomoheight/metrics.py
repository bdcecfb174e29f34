"""Evaluation metrics and the train-fitted min-max scaler.

Nodata pixels must be filtered out before calling the metric functions;
the pipeline always intersects prediction and truth masks first and reports
the surviving sample count.  Normalized MAE divides by the band's vertical
resolution so bands of different tomographic aperture are comparable
(3.06 m at 3 m resolution -> 1.02; 3.07 m at 2.3 m -> 1.33).
"""

from __future__ import annotations

import csv

import numpy as np

from .core import (
    BandId,
    MetricsReport,
    Polarization,
    SplitLabel,
    band_registry,
    pols_to_str,
)
from .errors import (
    ConstantChannelError,
    EmptyInputError,
    LengthMismatchError,
    NotFittedError,
    ZeroVarianceError,
)


def _paired(pred, truth) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(pred, dtype=np.float64).reshape(-1)
    t = np.asarray(truth, dtype=np.float64).reshape(-1)
    if p.shape[0] != t.shape[0]:
        raise LengthMismatchError(f"{p.shape[0]} predictions vs {t.shape[0]} truths")
    if p.shape[0] == 0:
        raise EmptyInputError("no samples")
    return p, t


def mae(pred, truth) -> float:
    p, t = _paired(pred, truth)
    return float(np.mean(np.abs(p - t)))


def rmse(pred, truth) -> float:
    p, t = _paired(pred, truth)
    return float(np.sqrt(np.mean((p - t) ** 2)))


def r2(pred, truth) -> float:
    """Coefficient of determination: 1 - SS_res / SS_tot."""
    p, t = _paired(pred, truth)
    ss_tot = float(np.sum((t - np.mean(t)) ** 2))
    if ss_tot == 0.0:
        raise ZeroVarianceError("truth values are constant")
    ss_res = float(np.sum((p - t) ** 2))
    return 1.0 - ss_res / ss_tot


def normalized_mae(mae_m: float, band: BandId) -> float:
    """MAE in meters divided by the band's vertical resolution."""
    if mae_m < 0:
        raise ValueError("mae must be non-negative")
    return mae_m / band_registry()[band].vertical_res_m


class MinMaxScaler:
    """Per-channel min-max normalization with train-only statistics.

    Fitted on training-split voxels; transform maps the training data into
    [0, 1] exactly and leaves out-of-range values unclipped so val/test data
    may fall outside the unit interval.
    """

    def __init__(self):
        self.mins: np.ndarray | None = None
        self.maxes: np.ndarray | None = None

    @property
    def n_channels(self) -> int:
        self._require_fitted()
        return len(self.mins)

    def fit(self, samples_by_channel) -> "MinMaxScaler":
        """Fit from a (C, n) array or a sequence of per-channel 1D arrays."""
        channels = [np.asarray(c, dtype=np.float64).reshape(-1)
                    for c in samples_by_channel]
        if len(channels) == 0:
            raise EmptyInputError("no channels to fit")
        mins, maxes = [], []
        for i, c in enumerate(channels):
            if c.size == 0:
                raise EmptyInputError(f"channel {i} has no samples")
            lo, hi = float(np.min(c)), float(np.max(c))
            if hi == lo:
                raise ConstantChannelError(
                    f"channel {i} has a single distinct value ({lo})")
            mins.append(lo)
            maxes.append(hi)
        self.mins = np.asarray(mins)
        self.maxes = np.asarray(maxes)
        return self

    def _require_fitted(self):
        if self.mins is None:
            raise NotFittedError("scaler used before fit")

    def _shaped_stats(self, values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        if values.shape[0] != len(self.mins):
            raise LengthMismatchError(
                f"expected {len(self.mins)} channels, got {values.shape[0]}")
        shape = (-1,) + (1,) * (values.ndim - 1)
        return self.mins.reshape(shape), self.maxes.reshape(shape)

    def transform(self, values) -> np.ndarray:
        """Scale channel-first data: (x - min) / (max - min), no clipping."""
        self._require_fitted()
        v = np.asarray(values, dtype=np.float64)
        mins, maxes = self._shaped_stats(v)
        return (v - mins) / (maxes - mins)

    def inverse(self, values) -> np.ndarray:
        self._require_fitted()
        v = np.asarray(values, dtype=np.float64)
        mins, maxes = self._shaped_stats(v)
        return v * (maxes - mins) + mins


def fit_minmax(samples_by_channel) -> MinMaxScaler:
    return MinMaxScaler().fit(samples_by_channel)


def scaler_to_json(scaler: MinMaxScaler) -> dict:
    scaler._require_fitted()
    return {"mins": scaler.mins.tolist(), "maxes": scaler.maxes.tolist()}


def scaler_from_json(doc: dict) -> MinMaxScaler:
    scaler = MinMaxScaler()
    scaler.mins = np.asarray(doc["mins"], dtype=np.float64)
    scaler.maxes = np.asarray(doc["maxes"], dtype=np.float64)
    return scaler


def compute_report(pred, truth, split: SplitLabel,
                   band: BandId | None = None,
                   pols: tuple[Polarization, ...] = ()) -> MetricsReport:
    """Bundle all four metrics over pre-filtered (finite, paired) samples."""
    m = mae(pred, truth)
    return MetricsReport(
        mae_m=m,
        rmse_m=rmse(pred, truth),
        r2=r2(pred, truth),
        normalized_mae=normalized_mae(m, band) if band is not None else float("nan"),
        n_samples=len(np.asarray(pred).reshape(-1)),
        split=split,
        band=band,
        pols=tuple(pols),
    )


_CSV_FIELDS = ("band", "pol", "split", "n", "mae", "rmse", "r2", "norm_mae")


def write_metrics_csv(reports, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(_CSV_FIELDS)
        for r in reports:
            writer.writerow([
                r.band.value if r.band is not None else "",
                pols_to_str(r.pols),
                r.split.name,
                r.n_samples,
                repr(r.mae_m),
                repr(r.rmse_m),
                repr(r.r2),
                repr(r.normalized_mae),
            ])


def read_metrics_csv(path) -> list[MetricsReport]:
    from .core import parse_pols

    reports = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            reports.append(MetricsReport(
                mae_m=float(row["mae"]),
                rmse_m=float(row["rmse"]),
                r2=float(row["r2"]),
                normalized_mae=float(row["norm_mae"]),
                n_samples=int(row["n"]),
                split=SplitLabel[row["split"]],
                band=BandId(row["band"]) if row["band"] else None,
                pols=parse_pols(row["pol"]) if row["pol"] else (),
            ))
    return reports
