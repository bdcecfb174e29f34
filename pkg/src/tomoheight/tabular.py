"""Single-pixel tabular pipeline: profile flattening and in-repo regressors.

Each pixel becomes one row whose features are the z-profile intensities per
polarization (optionally preceded by the normalized x, y coordinates).  The
model zoo is deliberately small but spans three families: closed-form ridge
regression, k-nearest-neighbors, and least-squares gradient-boosted trees
with exact split scans.  A selection harness fits every candidate on train
rows, scores validation MAE, and never touches test rows.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .core import Polarization, SplitAssignment, SplitLabel
from .errors import (
    BadParamsError,
    EmptySelectionError,
    SchemaMismatchError,
    SingularSystemError,
    TooFewRowsError,
)
from .fileio import AlignedScene
from .metrics import MinMaxScaler, mae
from .trainer import scene_channels


@dataclass(frozen=True)
class TabularDataset:
    x: np.ndarray             # (n, d) float64
    y: np.ndarray             # (n,) heights in meters
    pixel_index: np.ndarray   # (n,) row-major flat pixel indices
    feature_names: tuple[str, ...]
    nx: int
    ny: int

    def __post_init__(self):
        if self.x.shape[1] != len(self.feature_names):
            raise SchemaMismatchError("feature count does not match names")

    def __len__(self) -> int:
        return self.x.shape[0]


def flatten(scene: AlignedScene, pols: tuple[Polarization, ...],
            include_xy: bool, assignment: SplitAssignment, label: SplitLabel,
            scaler: MinMaxScaler | None = None,
            use_db: bool = False) -> TabularDataset:
    """One row per non-nodata pixel carrying `label`, in row-major pixel order.

    Feature order: optional (x, y) normalized to [0, 1] by grid extent, then
    z_1..z_nz for each polarization in the given order.  Intensities pass
    through the (train-fitted) scaler when one is provided.
    """
    channels = scene_channels(scene, pols, use_db)
    if scaler is not None:
        channels = scaler.transform(channels)
    nx, ny, nz = scene.nx, scene.ny, scene.cube.nz
    select = assignment.mask(label) & ~scene.chm.nodata
    if not select.any():
        raise EmptySelectionError(f"no usable pixels labeled {label.name}")
    px, py = np.nonzero(select)

    cols = []
    names = []
    if include_xy:
        cols.append(px / max(1, nx - 1))
        cols.append(py / max(1, ny - 1))
        names += ["x", "y"]
    for c, pol in enumerate(pols):
        cols.append(channels[c, px, py, :].T)  # (nz, n)
        names += [f"{pol.value}_z{i + 1}" for i in range(nz)]
    x = np.vstack([c[None, :] if c.ndim == 1 else c for c in cols]).T
    return TabularDataset(
        x=np.ascontiguousarray(x, dtype=np.float64),
        y=scene.chm.heights_m[px, py].astype(np.float64),
        pixel_index=px * ny + py,
        feature_names=tuple(names),
        nx=nx, ny=ny)


# -- regressor specs ----------------------------------------------------------

@dataclass(frozen=True)
class RidgeSpec:
    lam: float = 1.0

    def __post_init__(self):
        if self.lam < 0:
            raise BadParamsError("ridge lambda must be non-negative")

    name = "ridge"

    @property
    def complexity(self) -> tuple:
        return (0, 0)


@dataclass(frozen=True)
class KNNSpec:
    k: int = 5

    def __post_init__(self):
        if self.k < 1:
            raise BadParamsError("k must be positive")

    name = "knn"

    @property
    def complexity(self) -> tuple:
        return (1, 0)


@dataclass(frozen=True)
class GBTSpec:
    n_trees: int = 100
    max_depth: int = 3
    learning_rate: float = 0.1
    min_leaf: int = 5

    def __post_init__(self):
        if min(self.n_trees, self.max_depth, self.min_leaf) < 1 or self.learning_rate <= 0:
            raise BadParamsError("GBT hyperparameters must be positive")

    name = "gbt"

    @property
    def complexity(self) -> tuple:
        return (2, self.n_trees)


RegressorSpec = RidgeSpec | KNNSpec | GBTSpec


class _FittedModel:
    def __init__(self, kind: RegressorSpec, feature_names: tuple[str, ...]):
        self.kind = kind
        self.feature_names = feature_names

    def _check_schema(self, dataset: TabularDataset):
        if tuple(dataset.feature_names) != tuple(self.feature_names):
            raise SchemaMismatchError(
                f"expected features {self.feature_names}, got {dataset.feature_names}")

    def predict(self, dataset: TabularDataset) -> np.ndarray:
        self._check_schema(dataset)
        return self._predict(dataset.x)

    def _predict(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class RidgeModel(_FittedModel):
    """Closed-form ridge with an unpenalized intercept column."""

    def __init__(self, kind, feature_names, x, y):
        super().__init__(kind, feature_names)
        n, d = x.shape
        xa = np.hstack([x, np.ones((n, 1))])
        gram = xa.T @ xa
        penalty = np.eye(d + 1) * kind.lam
        penalty[d, d] = 0.0
        try:
            w = np.linalg.solve(gram + penalty, xa.T @ y)
        except np.linalg.LinAlgError as exc:
            raise SingularSystemError(str(exc)) from exc
        if not np.all(np.isfinite(w)):
            raise SingularSystemError("ridge solution is not finite")
        self.weights = w[:d]
        self.intercept = float(w[d])

    def _predict(self, x):
        return x @ self.weights + self.intercept


class KNNModel(_FittedModel):
    """Brute-force k-nearest-neighbors; ties break toward lower row index."""

    def __init__(self, kind, feature_names, x, y):
        super().__init__(kind, feature_names)
        self.train_x = x
        self.train_y = y

    def _predict(self, x):
        k = self.kind.k
        out = np.empty(x.shape[0])
        # chunked distance computation bounds memory on large query sets
        chunk = max(1, int(2e7) // max(1, self.train_x.shape[0]))
        for start in range(0, x.shape[0], chunk):
            q = x[start:start + chunk]
            d2 = ((q[:, None, :] - self.train_x[None, :, :]) ** 2).sum(axis=2)
            idx = np.argsort(d2, axis=1, kind="stable")[:, :k]
            out[start:start + chunk] = self.train_y[idx].mean(axis=1)
        return out


@dataclass
class _TreeNode:
    feature: int = -1
    threshold: float = 0.0
    left: "_TreeNode | None" = None
    right: "_TreeNode | None" = None
    value: float = 0.0

    @property
    def is_leaf(self) -> bool:
        return self.left is None


def _best_split(x, y, min_leaf):
    """Exact scan over sorted unique feature values, variance-reduction
    criterion; ties break toward the lower feature index, then threshold."""
    n, d = x.shape
    best = None  # (sse, feature, threshold)
    for j in range(d):
        order = np.argsort(x[:, j], kind="stable")
        xs = x[order, j]
        ys = y[order]
        cum = np.cumsum(ys)
        cum2 = np.cumsum(ys ** 2)
        n_left = np.arange(1, n)
        n_right = n - n_left
        boundary = xs[:-1] < xs[1:]
        ok = boundary & (n_left >= min_leaf) & (n_right >= min_leaf)
        if not ok.any():
            continue
        sse_left = cum2[:-1] - cum[:-1] ** 2 / n_left
        sse_right = (cum2[-1] - cum2[:-1]) - (cum[-1] - cum[:-1]) ** 2 / n_right
        total = np.where(ok, sse_left + sse_right, np.inf)
        i = int(np.argmin(total))  # first minimum -> lowest threshold
        if best is None or total[i] < best[0]:
            best = (float(total[i]), j, (xs[i] + xs[i + 1]) / 2.0)
    return best


def _build_tree(x, y, depth, max_depth, min_leaf) -> _TreeNode:
    node = _TreeNode(value=float(y.mean()))
    if depth >= max_depth or len(y) < 2 * min_leaf:
        return node
    split = _best_split(x, y, min_leaf)
    if split is None:
        return node
    _, j, thr = split
    mask = x[:, j] <= thr
    node.feature = j
    node.threshold = thr
    node.left = _build_tree(x[mask], y[mask], depth + 1, max_depth, min_leaf)
    node.right = _build_tree(x[~mask], y[~mask], depth + 1, max_depth, min_leaf)
    return node


def _tree_predict(node: _TreeNode, x: np.ndarray) -> np.ndarray:
    out = np.empty(x.shape[0])
    stack = [(node, np.arange(x.shape[0]))]
    while stack:
        nd, idx = stack.pop()
        if nd.is_leaf:
            out[idx] = nd.value
            continue
        mask = x[idx, nd.feature] <= nd.threshold
        stack.append((nd.left, idx[mask]))
        stack.append((nd.right, idx[~mask]))
    return out


class GBTModel(_FittedModel):
    """Least-squares gradient boosting: each stage fits a depth-limited tree
    to the residuals; prediction = mean(y) + lr * sum(trees)."""

    def __init__(self, kind, feature_names, x, y):
        super().__init__(kind, feature_names)
        self.base = float(y.mean())
        self.trees: list[_TreeNode] = []
        resid = y - self.base
        for _ in range(kind.n_trees):
            tree = _build_tree(x, resid, 0, kind.max_depth, kind.min_leaf)
            resid = resid - kind.learning_rate * _tree_predict(tree, x)
            self.trees.append(tree)

    def _predict(self, x):
        out = np.full(x.shape[0], self.base)
        for tree in self.trees:
            out += self.kind.learning_rate * _tree_predict(tree, x)
        return out

    def staged_train_mse(self, x, y) -> list[float]:
        """Training MSE after each boosting stage (non-increasing)."""
        pred = np.full(x.shape[0], self.base)
        out = []
        for tree in self.trees:
            pred = pred + self.kind.learning_rate * _tree_predict(tree, x)
            out.append(float(np.mean((pred - y) ** 2)))
        return out


_MODELS = {RidgeSpec: RidgeModel, KNNSpec: KNNModel, GBTSpec: GBTModel}


def fit(kind: RegressorSpec, train: TabularDataset, seed: int = 0) -> _FittedModel:
    """Fit one regressor; deterministic given the seed (the current zoo is
    seed-free, the argument fixes the interface)."""
    min_rows = max(10, getattr(kind, "k", 1), getattr(kind, "min_leaf", 1))
    if len(train) < min_rows:
        raise TooFewRowsError(f"{kind.name} needs at least {min_rows} rows")
    return _MODELS[type(kind)](kind, train.feature_names, train.x, train.y)


def predict(model: _FittedModel, dataset: TabularDataset) -> np.ndarray:
    return model.predict(dataset)


@dataclass(frozen=True)
class SelectionReport:
    candidates: tuple[RegressorSpec, ...]
    val_maes: tuple[float, ...]
    best_index: int

    @property
    def best_kind(self) -> RegressorSpec:
        return self.candidates[self.best_index]

    @property
    def best_val_mae(self) -> float:
        return self.val_maes[self.best_index]


def select_model(candidates, train: TabularDataset, val: TabularDataset,
                 seed: int = 0) -> tuple[_FittedModel, SelectionReport]:
    """Fit every candidate on train rows, pick the lowest validation MAE.

    Ties break toward fewer effective parameters (ridge < knn < gbt, then
    by tree count).  Test rows are structurally out of reach: the harness
    only ever receives train and val datasets.
    """
    if len(candidates) == 0:
        raise BadParamsError("candidate list must be non-empty")
    scored = []
    for i, kind in enumerate(candidates):
        model = fit(kind, train, seed)
        val_mae = mae(model.predict(val), val.y)
        scored.append((val_mae, kind.complexity, i, model))
    scored.sort(key=lambda s: (s[0], s[1], s[2]))
    best = scored[0]
    report = SelectionReport(
        candidates=tuple(candidates),
        val_maes=tuple(s[0] for s in sorted(scored, key=lambda s: s[2])),
        best_index=best[2])
    return best[3], report


def default_candidates() -> tuple[RegressorSpec, ...]:
    return (RidgeSpec(lam=1.0), KNNSpec(k=5),
            GBTSpec(n_trees=100, max_depth=3, learning_rate=0.1, min_leaf=5))


def inner_val_split(dataset: TabularDataset, val_fraction: float = 0.2,
                    seed: int = 0) -> tuple[TabularDataset, TabularDataset]:
    """Random row holdout from the training rows for model selection."""
    n = len(dataset)
    n_val = max(1, int(round(val_fraction * n)))
    if n_val >= n:
        raise TooFewRowsError("not enough rows for an inner validation split")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x56]))
    order = rng.permutation(n)

    def take(idx):
        return TabularDataset(x=dataset.x[idx], y=dataset.y[idx],
                              pixel_index=dataset.pixel_index[idx],
                              feature_names=dataset.feature_names,
                              nx=dataset.nx, ny=dataset.ny)

    return take(np.sort(order[n_val:])), take(np.sort(order[:n_val]))


@dataclass(frozen=True)
class TabularRunResult:
    include_xy: bool
    pols: tuple[Polarization, ...]
    selected: RegressorSpec
    val_mae: float
    test_mae: float
    baseline_val_mae: float
    baseline_test_mae: float
    n_train: int
    n_test: int
    selection: SelectionReport = field(repr=False, default=None)


def run_tabular_experiment(scene: AlignedScene, assignment: SplitAssignment,
                           pols, include_xy: bool, candidates=None,
                           seed: int = 0, scaler: MinMaxScaler | None = None,
                           use_db: bool = False) -> TabularRunResult:
    """Flatten, select a model on train/inner-val rows, then score held-out test."""
    candidates = candidates if candidates is not None else default_candidates()
    full_train = flatten(scene, pols, include_xy, assignment, SplitLabel.Train,
                         scaler, use_db)
    test = flatten(scene, pols, include_xy, assignment, SplitLabel.Test,
                   scaler, use_db)
    train, val = inner_val_split(full_train, seed=seed)
    model, report = select_model(candidates, train, val, seed)
    mean_pred = float(train.y.mean())
    return TabularRunResult(
        include_xy=include_xy,
        pols=tuple(pols),
        selected=report.best_kind,
        val_mae=report.best_val_mae,
        test_mae=mae(model.predict(test), test.y),
        baseline_val_mae=mae(np.full(len(val), mean_pred), val.y),
        baseline_test_mae=mae(np.full(len(test), mean_pred), test.y),
        n_train=len(full_train),
        n_test=len(test),
        selection=report)


def write_tabular_csv(rows: list[tuple[str, TabularRunResult]], path) -> None:
    """Geo-split comparison table: one row per (strategy, pols, xy setting)."""
    from .core import pols_to_str

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["strategy", "pol", "include_xy", "model",
                         "val_mae", "test_mae", "baseline_test_mae",
                         "n_train", "n_test"])
        for strategy, r in rows:
            writer.writerow([strategy, pols_to_str(r.pols),
                             str(r.include_xy).lower(), r.selected.name,
                             repr(r.val_mae), repr(r.test_mae),
                             repr(r.baseline_test_mae), r.n_train, r.n_test])


def dataset_to_csv(dataset: TabularDataset, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(list(dataset.feature_names) + ["target"])
        for i in range(len(dataset)):
            writer.writerow([repr(float(v)) for v in dataset.x[i]]
                            + [repr(float(dataset.y[i]))])
