"""Bayesian hyperparameter search: GP surrogate + expected improvement.

The sweep spends the first ceil(warmup_fraction * budget) trials on uniform
exploration (log-space for log dimensions), then fits a Gaussian process
with a Matern 5/2 kernel on the unit-cube encoding of all successful trials
and picks each next point by maximizing expected improvement over a stream
of seeded quasi-random (shifted Halton) candidates.  Failed trials are
recorded but never enter the surrogate.  Deterministic given the seed.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import (
    AllTrialsFailedError,
    BadSpecError,
    OutOfSpaceError,
)

#: Isotropic length-scale grid for the kernel's marginal-likelihood fit.
LENGTH_SCALE_GRID = (0.1, 0.2, 0.5, 1.0, 2.0)

#: Observation noise pinned small so the surrogate interpolates.
OBS_NOISE = 1e-6

#: EI candidates evaluated per proposal.
N_CANDIDATES = 1024


@dataclass(frozen=True)
class Continuous:
    lo: float
    hi: float
    log: bool = False

    def __post_init__(self):
        if not (self.lo < self.hi):
            raise BadSpecError("continuous dimension needs lo < hi")
        if self.log and self.lo <= 0:
            raise BadSpecError("log dimension needs positive bounds")


@dataclass(frozen=True)
class Integer:
    lo: int
    hi: int

    def __post_init__(self):
        if not (self.lo < self.hi):
            raise BadSpecError("integer dimension needs lo < hi")


@dataclass(frozen=True)
class Categorical:
    choices: tuple

    def __post_init__(self):
        if len(self.choices) == 0:
            raise BadSpecError("categorical dimension needs choices")


Dimension = Continuous | Integer | Categorical


class SearchSpace:
    def __init__(self, dims: dict[str, Dimension]):
        if len(dims) == 0:
            raise BadSpecError("search space is empty")
        self.dims = dict(dims)

    @property
    def names(self) -> list[str]:
        return list(self.dims)

    def encoded_width(self) -> int:
        return sum(len(d.choices) if isinstance(d, Categorical) else 1
                   for d in self.dims.values())

    def encode(self, point: dict) -> np.ndarray:
        """Map a parameter point onto the unit cube (one-hot categoricals)."""
        out = []
        for name, dim in self.dims.items():
            if name not in point:
                raise OutOfSpaceError(f"point is missing dimension {name!r}")
            v = point[name]
            if isinstance(dim, Continuous):
                if not (dim.lo <= v <= dim.hi):
                    raise OutOfSpaceError(f"{name}={v} outside [{dim.lo}, {dim.hi}]")
                if dim.log:
                    out.append((math.log(v) - math.log(dim.lo))
                               / (math.log(dim.hi) - math.log(dim.lo)))
                else:
                    out.append((v - dim.lo) / (dim.hi - dim.lo))
            elif isinstance(dim, Integer):
                if not (dim.lo <= v <= dim.hi):
                    raise OutOfSpaceError(f"{name}={v} outside [{dim.lo}, {dim.hi}]")
                out.append((v - dim.lo) / (dim.hi - dim.lo))
            else:
                if v not in dim.choices:
                    raise OutOfSpaceError(f"{name}={v!r} not in {dim.choices}")
                onehot = [0.0] * len(dim.choices)
                onehot[dim.choices.index(v)] = 1.0
                out.extend(onehot)
        return np.asarray(out, dtype=np.float64)

    def decode(self, vector: np.ndarray) -> dict:
        """Inverse of encode; integers round, categoricals take the argmax."""
        vector = np.asarray(vector, dtype=np.float64)
        if vector.shape != (self.encoded_width(),):
            raise OutOfSpaceError(
                f"expected vector of width {self.encoded_width()}, got {vector.shape}")
        point = {}
        i = 0
        for name, dim in self.dims.items():
            if isinstance(dim, Continuous):
                u = min(1.0, max(0.0, vector[i]))
                if dim.log:
                    point[name] = math.exp(
                        math.log(dim.lo) + u * (math.log(dim.hi) - math.log(dim.lo)))
                else:
                    point[name] = dim.lo + u * (dim.hi - dim.lo)
                i += 1
            elif isinstance(dim, Integer):
                u = min(1.0, max(0.0, vector[i]))
                point[name] = int(dim.lo + round(u * (dim.hi - dim.lo)))
                i += 1
            else:
                k = len(dim.choices)
                point[name] = dim.choices[int(np.argmax(vector[i:i + k]))]
                i += k
        return point

    def sample_uniform(self, rng: np.random.Generator) -> dict:
        point = {}
        for name, dim in self.dims.items():
            if isinstance(dim, Continuous):
                if dim.log:
                    point[name] = math.exp(rng.uniform(math.log(dim.lo), math.log(dim.hi)))
                else:
                    point[name] = float(rng.uniform(dim.lo, dim.hi))
            elif isinstance(dim, Integer):
                point[name] = int(rng.integers(dim.lo, dim.hi + 1))
            else:
                point[name] = dim.choices[int(rng.integers(len(dim.choices)))]
        return point

    def point_from_unit(self, u: np.ndarray) -> dict:
        """Raw per-dimension unit coordinates -> point (floor for categoricals)."""
        point = {}
        for j, (name, dim) in enumerate(self.dims.items()):
            v = float(u[j])
            if isinstance(dim, Continuous):
                if dim.log:
                    point[name] = math.exp(
                        math.log(dim.lo) + v * (math.log(dim.hi) - math.log(dim.lo)))
                else:
                    point[name] = dim.lo + v * (dim.hi - dim.lo)
            elif isinstance(dim, Integer):
                point[name] = int(dim.lo + round(v * (dim.hi - dim.lo)))
            else:
                point[name] = dim.choices[min(len(dim.choices) - 1,
                                              int(v * len(dim.choices)))]
        return point


@dataclass(frozen=True)
class Trial:
    trial_id: int
    params: dict
    value: float | None
    status: str  # "ok" | "failed"


def _matern52(d: np.ndarray) -> np.ndarray:
    s = math.sqrt(5.0) * d
    return (1.0 + s + s ** 2 / 3.0) * np.exp(-s)


class GaussianProcess:
    """Zero-mean GP on standardized targets, Matern 5/2, isotropic length
    scale fitted by marginal likelihood over a fixed grid."""

    def __init__(self, noise: float = OBS_NOISE,
                 scale_grid=LENGTH_SCALE_GRID):
        self.noise = noise
        self.scale_grid = scale_grid
        self._fit = None

    def fit(self, x: np.ndarray, y: np.ndarray) -> "GaussianProcess":
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        y = np.asarray(y, dtype=np.float64)
        mu = float(y.mean())
        sd = float(y.std())
        if sd == 0.0:
            sd = 1.0
        z = (y - mu) / sd
        dists = np.sqrt(np.maximum(
            ((x[:, None, :] - x[None, :, :]) ** 2).sum(axis=2), 0.0))
        best = None
        n = len(y)
        for ell in self.scale_grid:
            k = _matern52(dists / ell) + self.noise * np.eye(n)
            try:
                chol = np.linalg.cholesky(k)
            except np.linalg.LinAlgError:
                continue
            alpha = np.linalg.solve(chol.T, np.linalg.solve(chol, z))
            logml = (-0.5 * float(z @ alpha)
                     - float(np.log(np.diag(chol)).sum())
                     - 0.5 * n * math.log(2 * math.pi))
            if best is None or logml > best[0]:
                best = (logml, ell, chol, alpha)
        if best is None:
            raise AllTrialsFailedError("GP fit failed for every length scale")
        _, self.ell, chol, alpha = best
        self._fit = (x, chol, alpha, mu, sd)
        return self

    def predict(self, xs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        x, chol, alpha, mu, sd = self._fit
        xs = np.atleast_2d(np.asarray(xs, dtype=np.float64))
        d = np.sqrt(np.maximum(
            ((xs[:, None, :] - x[None, :, :]) ** 2).sum(axis=2), 0.0))
        ks = _matern52(d / self.ell)
        mean = mu + sd * (ks @ alpha)
        v = np.linalg.solve(chol, ks.T)
        var = np.maximum(1.0 - (v ** 2).sum(axis=0), 0.0) * sd ** 2
        return mean, var


def _norm_cdf(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.vectorize(math.erf)(z / math.sqrt(2.0)))


def expected_improvement(mean, var, best) -> np.ndarray:
    sd = np.sqrt(var)
    improve = best - mean
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(sd > 0, improve / np.where(sd > 0, sd, 1.0), 0.0)
    ei = improve * _norm_cdf(z) + sd * np.exp(-z ** 2 / 2.0) / math.sqrt(2 * math.pi)
    return np.where(sd > 1e-12, ei, np.maximum(improve, 0.0))


_PRIMES = (2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37)


def _halton(index: int, base: int) -> float:
    f, r = 1.0, 0.0
    i = index
    while i > 0:
        f /= base
        r += f * (i % base)
        i //= base
    return r


class _HaltonStream:
    """Shifted Halton sequence over [0,1)^d; the seed fixes the shift."""

    def __init__(self, d: int, rng: np.random.Generator):
        if d > len(_PRIMES):
            raise BadSpecError(f"at most {len(_PRIMES)} dimensions supported")
        self.bases = _PRIMES[:d]
        self.shift = rng.random(d)
        self.index = 0

    def take(self, n: int) -> np.ndarray:
        out = np.empty((n, len(self.bases)))
        for r in range(n):
            self.index += 1
            for j, b in enumerate(self.bases):
                out[r, j] = (_halton(self.index, b) + self.shift[j]) % 1.0
        return out


def sweep(space: SearchSpace, objective, budget: int,
          warmup_fraction: float = 0.2, seed: int = 0,
          batch_size: int = 1, executor=None) -> tuple[Trial, list[Trial]]:
    """Minimize `objective(params) -> float` over the space within `budget` trials.

    Proposals come in synchronous batches of `batch_size`: the surrogate is
    refit only at batch boundaries, so results are independent of completion
    order inside a batch.  `executor` (optional, `.map(fn, seq)`) evaluates a
    batch in parallel; objective exceptions mark trials failed.
    """
    if budget < 5:
        raise BadSpecError("sweep budget must be at least 5")
    if not (0 < warmup_fraction <= 1):
        raise BadSpecError("warmup_fraction must be in (0, 1]")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x53]))
    halton = _HaltonStream(len(space.dims), rng)
    n_warm = math.ceil(warmup_fraction * budget)

    trials: list[Trial] = []
    ok_x: list[np.ndarray] = []
    ok_y: list[float] = []

    def propose_batch(k: int) -> list[dict]:
        if len(trials) < n_warm or len(ok_y) < 2:
            return [space.sample_uniform(rng) for _ in range(k)]
        gp = GaussianProcess().fit(np.vstack(ok_x), np.asarray(ok_y))
        cand_units = halton.take(N_CANDIDATES)
        cand_points = [space.point_from_unit(u) for u in cand_units]
        cand_enc = np.vstack([space.encode(p) for p in cand_points])
        mean, var = gp.predict(cand_enc)
        ei = expected_improvement(mean, var, min(ok_y))
        order = np.argsort(-ei, kind="stable")
        return [cand_points[int(i)] for i in order[:k]]

    def run_batch(points: list[dict]):
        if executor is not None:
            return list(executor.map(_guarded(objective), points))
        return [_guarded(objective)(p) for p in points]

    while len(trials) < budget:
        k = min(batch_size, budget - len(trials))
        # stay uniform until the warmup quota is consumed
        k = min(k, n_warm - len(trials)) if len(trials) < n_warm else k
        points = propose_batch(max(1, k))[:max(1, k)]
        for point, result in zip(points, run_batch(points)):
            tid = len(trials)
            if result is None or not np.isfinite(result):
                trials.append(Trial(tid, point, None, "failed"))
            else:
                value = float(result)
                trials.append(Trial(tid, point, value, "ok"))
                ok_x.append(space.encode(point))
                ok_y.append(value)

    ok = [t for t in trials if t.status == "ok"]
    if not ok:
        raise AllTrialsFailedError("every trial failed")
    best = min(ok, key=lambda t: (t.value, t.trial_id))
    return best, trials


def _guarded(objective):
    def run(point):
        try:
            return objective(point)
        except Exception:
            return None
    return run


def write_sweep_csv(space: SearchSpace, trials: list[Trial], path) -> None:
    names = space.names
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["trial_id"] + names + ["val_mae", "status"])
        for t in trials:
            row = [t.trial_id] + [repr(float(t.params[n]))
                                  if isinstance(t.params[n], (float, np.floating))
                                  else t.params[n] for n in names]
            row += ["" if t.value is None else repr(float(t.value)), t.status]
            writer.writerow(row)


# -- JSON space documents -----------------------------------------------------

def space_from_json(doc: dict) -> SearchSpace:
    dims: dict[str, Dimension] = {}
    for name, d in doc.items():
        kind = d.get("type")
        if kind == "continuous":
            dims[name] = Continuous(lo=float(d["lo"]), hi=float(d["hi"]),
                                    log=bool(d.get("log", False)))
        elif kind == "integer":
            dims[name] = Integer(lo=int(d["lo"]), hi=int(d["hi"]))
        elif kind == "categorical":
            dims[name] = Categorical(choices=tuple(d["choices"]))
        else:
            raise BadSpecError(f"dimension {name!r} has unknown type {kind!r}")
    return SearchSpace(dims)


def space_to_json(space: SearchSpace) -> dict:
    out = {}
    for name, dim in space.dims.items():
        if isinstance(dim, Continuous):
            out[name] = {"type": "continuous", "lo": dim.lo, "hi": dim.hi,
                         "log": dim.log}
        elif isinstance(dim, Integer):
            out[name] = {"type": "integer", "lo": dim.lo, "hi": dim.hi}
        else:
            out[name] = {"type": "categorical", "choices": list(dim.choices)}
    return out


def default_cnn_space() -> SearchSpace:
    """Default CNN sweep ranges: lr log-uniform clustered near 1e-4,
    small batch sizes, moderate dropout."""
    return SearchSpace({
        "learning_rate": Continuous(1e-5, 10 ** -3.5, log=True),
        "batch_size": Integer(2, 16),
        "dropout_rate": Categorical((0.0, 0.1, 0.2, 0.3, 0.4, 0.5)),
    })


def load_space_file(path) -> tuple[SearchSpace, dict]:
    """Read a sweep spec document: {"dims": {...}, "objective": {...}}."""
    with open(path) as fh:
        doc = json.load(fh)
    if not isinstance(doc, dict) or "dims" not in doc:
        raise BadSpecError("sweep spec must be an object with a 'dims' section")
    return space_from_json(doc["dims"]), doc.get("objective", {})
