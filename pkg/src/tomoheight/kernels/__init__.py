"""Convolution kernel dispatch: compiled extension if present, NumPy otherwise.

The backend is chosen once at import time.  Set TOMOHEIGHT_KERNELS=numpy to
force the fallback (e.g. for the benchmark baseline) or =cython to require
the compiled extension.  Both backends satisfy the same contracts; results
agree to floating-point summation order.
"""

from __future__ import annotations

import os

from . import _ops_numpy

_requested = os.environ.get("TOMOHEIGHT_KERNELS", "auto").lower()

_impl = _ops_numpy
BACKEND = "numpy"

if _requested in ("auto", "cython"):
    try:
        from . import _conv3d_cy as _cy

        _impl = _cy
        BACKEND = "cython"
    except ImportError:
        if _requested == "cython":
            raise ImportError(
                "TOMOHEIGHT_KERNELS=cython but the compiled extension is not "
                "built; run `python setup.py build_ext --inplace`")
elif _requested != "numpy":
    raise ValueError(f"unknown TOMOHEIGHT_KERNELS value: {_requested!r}")


def conv3d_forward(x, w, stride=(1, 1, 1), pad=(0, 0, 0)):
    """y[n,o] = sum_c w[o,c] * x[n,c] over the kernel window, plus striding."""
    return _impl.conv3d_forward(x, w, tuple(stride), tuple(pad))


def conv3d_backward_data(dy, w, x_shape, stride=(1, 1, 1), pad=(0, 0, 0)):
    """Gradient of conv3d_forward with respect to its input."""
    return _impl.conv3d_backward_data(dy, w, tuple(x_shape), tuple(stride), tuple(pad))


def conv3d_backward_weights(x, dy, w_shape, stride=(1, 1, 1), pad=(0, 0, 0)):
    """Gradient of conv3d_forward with respect to the filters."""
    return _impl.conv3d_backward_weights(x, dy, tuple(w_shape), tuple(stride), tuple(pad))


def out_shape(in_shape, kshape, stride, pad):
    return _ops_numpy.out_shape(in_shape, kshape, stride, pad)
