"""Benchmark the compiled convolution kernels against the NumPy fallback.

Times forward, backward-data and backward-weights passes at the shapes the
training loop actually produces (Model2 at W=16, batch 4), for float32 and
float64. Run from the repository root:

    python benchmarks/bench_kernels.py
"""

import time

import numpy as np

from tomoheight.kernels import _ops_numpy

try:
    from tomoheight.kernels import _conv3d_cy as _cy
except ImportError:
    _cy = None

# (input shape, weight shape): the conv layers of Model2/base-8 at W=16
SHAPES = [
    ((4, 3, 16, 16, 36), (8, 3, 3, 3, 3)),
    ((4, 8, 16, 16, 36), (8, 8, 3, 3, 3)),
    ((4, 8, 8, 8, 18), (16, 8, 3, 3, 3)),
    ((4, 16, 8, 8, 18), (16, 16, 3, 3, 3)),
    ((4, 16, 4, 4, 9), (32, 16, 3, 3, 3)),
    ((4, 32, 4, 4, 9), (32, 32, 3, 3, 3)),
]
STRIDE, PAD = (1, 1, 1), (1, 1, 1)
REPS = 5


def time_call(fn, *args):
    fn(*args)  # warm up
    t0 = time.perf_counter()
    for _ in range(REPS):
        fn(*args)
    return (time.perf_counter() - t0) / REPS


def bench(backend, name, dtype):
    rng = np.random.default_rng(0)
    totals = {"forward": 0.0, "bwd_data": 0.0, "bwd_weights": 0.0}
    for xs, ws in SHAPES:
        x = rng.standard_normal(xs).astype(dtype)
        w = rng.standard_normal(ws).astype(dtype)
        y = backend.conv3d_forward(x, w, STRIDE, PAD)
        dy = rng.standard_normal(y.shape).astype(dtype)
        totals["forward"] += time_call(backend.conv3d_forward, x, w, STRIDE, PAD)
        totals["bwd_data"] += time_call(
            backend.conv3d_backward_data, dy, w, x.shape, STRIDE, PAD)
        totals["bwd_weights"] += time_call(
            backend.conv3d_backward_weights, x, dy, w.shape, STRIDE, PAD)
    return totals


def main():
    print(f"{'backend':8s} {'dtype':8s} {'forward':>10s} {'bwd_data':>10s} "
          f"{'bwd_weights':>12s} {'step total':>11s}")
    for dtype in (np.float32, np.float64):
        rows = [("numpy", _ops_numpy)]
        if _cy is not None:
            rows.append(("cython", _cy))
        base = None
        for name, backend in rows:
            t = bench(backend, name, dtype)
            total = sum(t.values())
            note = ""
            if base is None:
                base = total
            else:
                note = f"  ({base / total:.2f}x vs numpy)"
            print(f"{name:8s} {np.dtype(dtype).name:8s} "
                  f"{t['forward'] * 1e3:9.1f}ms {t['bwd_data'] * 1e3:9.1f}ms "
                  f"{t['bwd_weights'] * 1e3:11.1f}ms {total * 1e3:10.1f}ms{note}")
    if _cy is None:
        print("\ncompiled extension not built; "
              "run `python setup.py build_ext --inplace` to compare")


if __name__ == "__main__":
    main()
