"""Patch datasets, the Adam/MSE training loop, and whole experiments.

Patches are pure: a W x W window enters a split's dataset only when every
pixel carries that split's label, so no patch ever mixes train/val/test
data.  The feature scaler is fitted on train-labeled voxels only.  Targets
stay in meters (no target scaling); to make meter-scale regression converge
within small epoch budgets, the output projection bias is initialized to
the training-target mean before optimization.

Training minimizes masked MSE with Adam, evaluates validation MAE after
every epoch, keeps the best-validation parameter snapshot and stops early
after `patience_epochs` epochs without improvement.  Everything is
deterministic given the config seed.
"""

from __future__ import annotations

import csv
import zlib
from dataclasses import dataclass, field

import numpy as np

from .core import (
    BandId,
    MetricsReport,
    Polarization,
    SplitAssignment,
    SplitLabel,
)
from .errors import (
    BadParamsError,
    DivergedLossError,
    EmptyDatasetError,
    NoPatchesError,
    NonFiniteError,
    ShapeMismatchError,
)
from .fileio import AlignedScene
from .geosplit import SplitSpec, make_split
from .metrics import MinMaxScaler, compute_report
from .volnet import ForwardCtx, ModelSpec, UNet3dRegressor, build_model, masked_mse

PATCH_WIDTHS = (16, 32, 64)

#: Small offset keeping the dB transform finite at zero intensity.
DB_EPS = 1e-12


def derive_seed(seed: int, component: str) -> np.random.SeedSequence:
    """Fan a single experiment seed out to named component streams."""
    return np.random.SeedSequence([seed, zlib.crc32(component.encode())])


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 8
    max_epochs: int = 150
    patience_epochs: int = 15
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    patch_w: int = 16
    train_stride: int | None = None  # None -> patch_w // 2
    eval_stride: int | None = None   # None -> patch_w (non-overlapping)
    use_db_transform: bool = False

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise BadParamsError("learning_rate must be positive")
        if self.batch_size < 1:
            raise BadParamsError("batch_size must be at least 1")
        if self.max_epochs < 1 or self.patience_epochs < 1:
            raise BadParamsError("epoch counts must be positive")
        if self.patience_epochs > self.max_epochs:
            raise BadParamsError("patience cannot exceed max_epochs")
        if self.patch_w not in PATCH_WIDTHS:
            raise BadParamsError(f"patch_w must be one of {PATCH_WIDTHS}")

    @property
    def effective_train_stride(self) -> int:
        return self.train_stride if self.train_stride is not None else self.patch_w // 2

    @property
    def effective_eval_stride(self) -> int:
        return self.eval_stride if self.eval_stride is not None else self.patch_w


@dataclass(frozen=True)
class PatchDataset:
    patches: np.ndarray   # (P, C, W, W, Z) scaler-transformed intensities
    targets: np.ndarray   # (P, W, W) heights in meters (zeros at nodata)
    masks: np.ndarray     # (P, W, W) True where the target is valid
    origins: np.ndarray   # (P, 2) window origin pixel coords
    label: SplitLabel
    scaler: MinMaxScaler

    def __len__(self) -> int:
        return self.patches.shape[0]


def db_transform(intensity: np.ndarray) -> np.ndarray:
    return 10.0 * np.log10(intensity + DB_EPS)


def _pol_indices(cube_pols, pols) -> list[int]:
    try:
        return [cube_pols.index(p) for p in pols]
    except ValueError as exc:
        raise BadParamsError(f"cube lacks requested polarization: {exc}") from exc


def scene_channels(scene: AlignedScene, pols: tuple[Polarization, ...],
                   use_db: bool) -> np.ndarray:
    """Channel-first (C, nx, ny, nz) float64 intensities, dB-transformed if asked."""
    idx = _pol_indices(list(scene.cube.pols), pols)
    vol = scene.cube.intensity[idx].astype(np.float64)
    return db_transform(vol) if use_db else vol


def fit_scene_scaler(scene: AlignedScene, assignment: SplitAssignment,
                     pols: tuple[Polarization, ...],
                     use_db: bool = False) -> MinMaxScaler:
    """Min-max scaler over train-labeled voxels only (all z bins)."""
    channels = scene_channels(scene, pols, use_db)
    train_mask = assignment.mask(SplitLabel.Train)
    return MinMaxScaler().fit(channels[:, train_mask, :].reshape(len(pols), -1))


def pure_window_origins(label_grid: np.ndarray, label: SplitLabel,
                        w: int, stride: int) -> np.ndarray:
    """Row-major origins of W x W windows whose pixels all carry `label`."""
    nx, ny = label_grid.shape
    ok = (label_grid == int(label)).astype(np.int32)
    # 2D summed-area table makes the purity test O(1) per window
    sat = np.zeros((nx + 1, ny + 1), dtype=np.int64)
    sat[1:, 1:] = ok.cumsum(0).cumsum(1)
    origins = []
    for x in range(0, nx - w + 1, stride):
        for y in range(0, ny - w + 1, stride):
            total = (sat[x + w, y + w] - sat[x, y + w]
                     - sat[x + w, y] + sat[x, y])
            if total == w * w:
                origins.append((x, y))
    return np.asarray(origins, dtype=np.int64).reshape(-1, 2)


def make_patches(scene: AlignedScene, assignment: SplitAssignment,
                 label: SplitLabel, w: int, stride: int,
                 scaler: MinMaxScaler, use_db: bool = False) -> PatchDataset:
    if w not in PATCH_WIDTHS:
        raise BadParamsError(f"patch width must be one of {PATCH_WIDTHS}")
    if not (1 <= stride <= w):
        raise BadParamsError("stride must be in [1, w]")
    if (assignment.nx, assignment.ny) != (scene.nx, scene.ny):
        raise ShapeMismatchError("assignment dims do not match the scene")
    origins = pure_window_origins(assignment.labels, label, w, stride)
    if len(origins) == 0:
        raise NoPatchesError(f"no pure {label.name} windows of width {w}")
    channels = scaler.transform(scene_channels(scene, tuple(scene.cube.pols), use_db))
    heights = scene.chm.heights_m.astype(np.float64)
    valid = ~scene.chm.nodata
    patches = np.empty((len(origins), channels.shape[0], w, w, scene.cube.nz))
    targets = np.empty((len(origins), w, w))
    masks = np.empty((len(origins), w, w), dtype=bool)
    for i, (x, y) in enumerate(origins):
        patches[i] = channels[:, x:x + w, y:y + w, :]
        t = heights[x:x + w, y:y + w]
        m = valid[x:x + w, y:y + w]
        targets[i] = np.where(m, t, 0.0)
        masks[i] = m
    return PatchDataset(patches=patches, targets=targets, masks=masks,
                        origins=origins, label=label, scaler=scaler)


class Adam:
    """Adam over a named parameter dict; step(grads) applies one update."""

    def __init__(self, params: dict[str, np.ndarray], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for k, p in self.params.items():
            g = grads[k]
            m = self.m[k]
            v = self.v[k]
            m += (1 - self.beta1) * (g - m)
            v += (1 - self.beta2) * (g * g - v)
            p -= (self.lr / bc1) * m / (np.sqrt(v / bc2) + self.eps)


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_mse: float
    val_mae: float


@dataclass(frozen=True)
class TrainHistory:
    epochs: tuple[EpochRecord, ...]
    best_epoch: int
    best_val_mae: float


def _forward_batched(model: UNet3dRegressor, patches: np.ndarray,
                     batch_size: int = 16) -> np.ndarray:
    out = []
    ctx = ForwardCtx(train=False)
    for i in range(0, len(patches), batch_size):
        out.append(model.forward(patches[i:i + batch_size], ctx))
    return np.concatenate(out, axis=0)


def evaluate_mae(model: UNet3dRegressor, ds: PatchDataset) -> float:
    pred = _forward_batched(model, ds.patches)
    n_valid = int(np.count_nonzero(ds.masks))
    if n_valid == 0:
        raise EmptyDatasetError("dataset has no valid target pixels")
    err = np.abs(np.where(ds.masks, pred - ds.targets, 0.0))
    return float(err.sum() / n_valid)


def init_output_bias(model: UNet3dRegressor, train_ds: PatchDataset) -> None:
    """Start the head's projection bias at the train-target mean so the
    meters-scale regression begins at the mean-baseline instead of zero."""
    valid = train_ds.masks
    mean_h = float(train_ds.targets[valid].mean()) if valid.any() else 0.0
    params = dict(model.named_params())
    params["head.proj.b"][...] = mean_h


def train(model: UNet3dRegressor, train_ds: PatchDataset, val_ds: PatchDataset,
          cfg: TrainConfig) -> tuple[UNet3dRegressor, TrainHistory]:
    if len(train_ds) == 0 or len(val_ds) == 0:
        raise EmptyDatasetError("train and val datasets must be non-empty")
    rng = np.random.default_rng(derive_seed(cfg.seed, "train-loop"))
    params = dict(model.named_params())
    opt = Adam(params, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps)

    best_mae = np.inf
    best_epoch = 0
    best_state: dict[str, np.ndarray] = {}
    epochs_since_best = 0
    records = []

    def snapshot():
        state = {k: v.copy() for k, v in params.items()}
        state.update({k: v.copy() for k, v in model.named_buffers()})
        return state

    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(len(train_ds))
        sq_sum = 0.0
        n_sum = 0
        for start in range(0, len(order), cfg.batch_size):
            sel = order[start:start + cfg.batch_size]
            x = train_ds.patches[sel]
            t = train_ds.targets[sel]
            mask = train_ds.masks[sel]
            model.zero_grad()
            try:
                pred = model.forward(x, ForwardCtx(train=True, rng=rng))
            except NonFiniteError as exc:
                raise DivergedLossError(f"diverged at epoch {epoch}: {exc}") from exc
            loss, d_pred = masked_mse(pred, t, mask)
            if not np.isfinite(loss):
                raise DivergedLossError(f"non-finite loss at epoch {epoch}")
            model.backward(d_pred)
            opt.step(dict(model.named_grads()))
            n_batch = int(np.count_nonzero(mask))
            sq_sum += loss * n_batch
            n_sum += n_batch
        train_mse = sq_sum / max(1, n_sum)
        if not np.isfinite(train_mse):
            raise DivergedLossError(f"non-finite epoch loss at epoch {epoch}")
        try:
            val_mae = evaluate_mae(model, val_ds)
        except NonFiniteError as exc:
            raise DivergedLossError(f"diverged at epoch {epoch}: {exc}") from exc
        if not np.isfinite(val_mae):
            raise DivergedLossError(f"non-finite validation MAE at epoch {epoch}")
        records.append(EpochRecord(epoch=epoch, train_mse=train_mse, val_mae=val_mae))
        if val_mae < best_mae:
            best_mae = val_mae
            best_epoch = epoch
            best_state = snapshot()
            epochs_since_best = 0
        else:
            epochs_since_best += 1
        if epochs_since_best >= cfg.patience_epochs:
            break

    live = dict(model.named_params())
    live.update(dict(model.named_buffers()))
    for k, v in best_state.items():
        live[k][...] = v
    return model, TrainHistory(epochs=tuple(records), best_epoch=best_epoch,
                               best_val_mae=float(best_mae))


def write_history_csv(history: TrainHistory, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_mse", "val_mae"])
        for rec in history.epochs:
            writer.writerow([rec.epoch, repr(rec.train_mse), repr(rec.val_mae)])


@dataclass(frozen=True)
class ExperimentResult:
    model: UNet3dRegressor
    history: TrainHistory
    reports: dict[SplitLabel, MetricsReport]
    assignment: SplitAssignment
    scaler: MinMaxScaler
    datasets: dict[SplitLabel, PatchDataset] = field(repr=False, default_factory=dict)


def _split_report(model, ds: PatchDataset, band: BandId, pols,
                  label: SplitLabel) -> MetricsReport:
    pred = _forward_batched(model, ds.patches)
    valid = ds.masks
    return compute_report(pred[valid], ds.targets[valid], label, band, pols)


def run_experiment(scene: AlignedScene, split: SplitSpec | SplitAssignment,
                   model_spec: ModelSpec, cfg: TrainConfig,
                   pols: tuple[Polarization, ...] | None = None) -> ExperimentResult:
    """Split, fit the scaler on train voxels, train, and evaluate all splits.

    `split` may be a strategy spec (the assignment is generated) or a
    ready-made assignment grid.  Test patches are built up front but only
    evaluated once, after training (and the best-validation snapshot
    restore) completes.
    """
    pols = tuple(pols) if pols is not None else tuple(scene.cube.pols)
    if model_spec.in_channels != len(pols):
        raise ShapeMismatchError(
            f"model expects {model_spec.in_channels} channels, got {len(pols)} pols")
    band = scene.cube.band
    sub_scene = _select_pols(scene, pols)
    if isinstance(split, SplitAssignment):
        assignment = split
    else:
        assignment = make_split(scene.nx, scene.ny, split)
    scaler = fit_scene_scaler(sub_scene, assignment, pols, cfg.use_db_transform)

    w = cfg.patch_w
    datasets = {
        SplitLabel.Train: make_patches(sub_scene, assignment, SplitLabel.Train,
                                       w, cfg.effective_train_stride, scaler,
                                       cfg.use_db_transform),
        SplitLabel.Val: make_patches(sub_scene, assignment, SplitLabel.Val,
                                     w, cfg.effective_eval_stride, scaler,
                                     cfg.use_db_transform),
        SplitLabel.Test: make_patches(sub_scene, assignment, SplitLabel.Test,
                                      w, cfg.effective_eval_stride, scaler,
                                      cfg.use_db_transform),
    }

    model = build_model(model_spec, seed=int(derive_seed(cfg.seed, "model-init")
                                             .generate_state(1)[0]))
    init_output_bias(model, datasets[SplitLabel.Train])
    model, history = train(model, datasets[SplitLabel.Train],
                           datasets[SplitLabel.Val], cfg)

    reports = {label: _split_report(model, ds, band, pols, label)
               for label, ds in datasets.items()}
    return ExperimentResult(model=model, history=history, reports=reports,
                            assignment=assignment, scaler=scaler, datasets=datasets)


def _select_pols(scene: AlignedScene, pols: tuple[Polarization, ...]) -> AlignedScene:
    if tuple(scene.cube.pols) == tuple(pols):
        return scene
    idx = _pol_indices(list(scene.cube.pols), pols)
    from .core import TomoCube

    cube = TomoCube(band=scene.cube.band, pols=tuple(pols),
                    z_centers_m=scene.cube.z_centers_m,
                    intensity=np.ascontiguousarray(scene.cube.intensity[idx]),
                    az_spacing_m=scene.cube.az_spacing_m,
                    rng_spacing_m=scene.cube.rng_spacing_m)
    return AlignedScene(cube=cube, chm=scene.chm)
