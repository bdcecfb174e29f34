"""Building-block layers with explicit forward/backward passes.

Each layer caches what its backward pass needs during forward; backward
returns the input gradient and accumulates parameter gradients in place.
Convolutions delegate their heavy lifting to `tomoheight.kernels` (compiled
extension or NumPy fallback); everything else is cheap enough to stay in
NumPy regardless of backend.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import kernels
from ..errors import ShapeMismatchError


@dataclass
class ForwardCtx:
    """Per-forward options: training mode and the RNG feeding dropout masks."""

    train: bool = False
    rng: np.random.Generator | None = None


EVAL_CTX = ForwardCtx(train=False)


class Module:
    def __init__(self):
        self._params: dict[str, np.ndarray] = {}
        self._grads: dict[str, np.ndarray] = {}
        self._buffers: dict[str, np.ndarray] = {}
        self._children: list[tuple[str, "Module"]] = []

    def _register(self, name: str, value: np.ndarray) -> np.ndarray:
        self._params[name] = value
        self._grads[name] = np.zeros_like(value)
        return value

    def _add_child(self, name: str, child: "Module") -> "Module":
        self._children.append((name, child))
        return child

    def iter_modules(self):
        yield self
        for _, child in self._children:
            yield from child.iter_modules()

    def named_params(self, prefix: str = ""):
        for name, arr in self._params.items():
            yield prefix + name, arr
        for cname, child in self._children:
            yield from child.named_params(f"{prefix}{cname}.")

    def named_grads(self, prefix: str = ""):
        for name, arr in self._grads.items():
            yield prefix + name, arr
        for cname, child in self._children:
            yield from child.named_grads(f"{prefix}{cname}.")

    def named_buffers(self, prefix: str = ""):
        for name, arr in self._buffers.items():
            yield prefix + name, arr
        for cname, child in self._children:
            yield from child.named_buffers(f"{prefix}{cname}.")

    def zero_grad(self):
        for g in self._grads.values():
            g[...] = 0
        for _, child in self._children:
            child.zero_grad()

    def n_params(self) -> int:
        return sum(arr.size for _, arr in self.named_params())

    def forward(self, x, ctx: ForwardCtx):
        raise NotImplementedError

    def backward(self, dy):
        raise NotImplementedError

    def __call__(self, x, ctx: ForwardCtx = EVAL_CTX):
        return self.forward(x, ctx)


class Conv3d(Module):
    """3D convolution with bias; He-initialized weights."""

    def __init__(self, cin, cout, kernel, stride=(1, 1, 1), pad=(0, 0, 0),
                 dtype=np.float32, rng=None):
        super().__init__()
        self.cin, self.cout = cin, cout
        self.kernel = tuple(kernel)
        self.stride = tuple(stride)
        self.pad = tuple(pad)
        rng = rng or np.random.default_rng(0)
        fan_in = cin * int(np.prod(self.kernel))
        std = np.sqrt(2.0 / fan_in)
        self.w = self._register(
            "w", (rng.standard_normal((cout, cin) + self.kernel) * std).astype(dtype))
        self.b = self._register("b", np.zeros(cout, dtype=dtype))
        self._x = None

    def forward(self, x, ctx):
        if x.shape[1] != self.cin:
            raise ShapeMismatchError(
                f"conv expects {self.cin} channels, got {x.shape[1]}")
        if x.dtype != self.w.dtype:
            x = x.astype(self.w.dtype)
        self._x = x
        y = kernels.conv3d_forward(x, self.w, self.stride, self.pad)
        return y + self.b[None, :, None, None, None]

    def backward(self, dy):
        x = self._x
        self._grads["b"] += dy.sum(axis=(0, 2, 3, 4))
        self._grads["w"] += kernels.conv3d_backward_weights(
            x, dy, self.w.shape, self.stride, self.pad)
        return kernels.conv3d_backward_data(dy, self.w, x.shape, self.stride, self.pad)


class BatchNorm3d(Module):
    """Per-channel batch normalization over (batch, x, y, z)."""

    def __init__(self, c, momentum=0.1, eps=1e-5, dtype=np.float32):
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.gamma = self._register("gamma", np.ones(c, dtype=dtype))
        self.beta = self._register("beta", np.zeros(c, dtype=dtype))
        self._buffers["running_mean"] = np.zeros(c, dtype=dtype)
        self._buffers["running_var"] = np.ones(c, dtype=dtype)
        self._cache = None

    @staticmethod
    def _bcast(v):
        return v[None, :, None, None, None]

    def forward(self, x, ctx):
        axes = (0, 2, 3, 4)
        if ctx.train:
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            n = x.size // x.shape[1]
            rm, rv = self._buffers["running_mean"], self._buffers["running_var"]
            rm += self.momentum * (mean.astype(rm.dtype) - rm)
            unbiased = var * (n / max(1, n - 1))
            rv += self.momentum * (unbiased.astype(rv.dtype) - rv)
        else:
            mean = self._buffers["running_mean"]
            var = self._buffers["running_var"]
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - self._bcast(mean)) * self._bcast(inv_std)
        self._cache = (xhat, inv_std, ctx.train)
        return self._bcast(self.gamma) * xhat + self._bcast(self.beta)

    def backward(self, dy):
        xhat, inv_std, was_train = self._cache
        axes = (0, 2, 3, 4)
        self._grads["beta"] += dy.sum(axis=axes)
        self._grads["gamma"] += (dy * xhat).sum(axis=axes)
        g = dy * self._bcast(self.gamma)
        if not was_train:
            return g * self._bcast(inv_std)
        n = dy.size // dy.shape[1]
        mean_g = g.mean(axis=axes)
        mean_gx = (g * xhat).mean(axis=axes)
        return self._bcast(inv_std) * (
            g - self._bcast(mean_g) - xhat * self._bcast(mean_gx))


class ReLU(Module):
    def __init__(self):
        super().__init__()
        self._mask = None

    def forward(self, x, ctx):
        self._mask = x > 0
        return x * self._mask

    def backward(self, dy):
        return dy * self._mask


class Dropout(Module):
    """Inverted dropout; identity in eval mode or at rate 0."""

    def __init__(self, rate):
        super().__init__()
        self.rate = rate
        self._mask = None

    def forward(self, x, ctx):
        if not ctx.train or self.rate == 0:
            self._mask = None
            return x
        if ctx.rng is None:
            raise ValueError("dropout in train mode needs a ForwardCtx rng")
        keep = 1.0 - self.rate
        self._mask = (ctx.rng.random(x.shape) < keep).astype(x.dtype) / keep
        return x * self._mask

    def backward(self, dy):
        if self._mask is None:
            return dy
        return dy * self._mask


class MaxPool3d(Module):
    """2x2x2 max pooling; odd trailing rows/columns/bins are dropped."""

    def __init__(self):
        super().__init__()
        self._cache = None

    def forward(self, x, ctx):
        n, c, X, Y, Z = x.shape
        x2, y2, z2 = X // 2, Y // 2, Z // 2
        if min(x2, y2, z2) < 1:
            raise ShapeMismatchError(f"cannot pool shape {x.shape[2:]}")
        xc = x[:, :, :x2 * 2, :y2 * 2, :z2 * 2]
        win = (xc.reshape(n, c, x2, 2, y2, 2, z2, 2)
               .transpose(0, 1, 2, 4, 6, 3, 5, 7)
               .reshape(n, c, x2, y2, z2, 8))
        idx = win.argmax(axis=-1)  # first max wins ties
        y = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
        self._cache = (idx, x.shape)
        return y

    def backward(self, dy):
        idx, x_shape = self._cache
        n, c, X, Y, Z = x_shape
        x2, y2, z2 = X // 2, Y // 2, Z // 2
        dwin = np.zeros((n, c, x2, y2, z2, 8), dtype=dy.dtype)
        np.put_along_axis(dwin, idx[..., None], dy[..., None], axis=-1)
        dxc = (dwin.reshape(n, c, x2, y2, z2, 2, 2, 2)
               .transpose(0, 1, 2, 5, 3, 6, 4, 7)
               .reshape(n, c, x2 * 2, y2 * 2, z2 * 2))
        if (x2 * 2, y2 * 2, z2 * 2) == (X, Y, Z):
            return dxc
        dx = np.zeros(x_shape, dtype=dy.dtype)
        dx[:, :, :x2 * 2, :y2 * 2, :z2 * 2] = dxc
        return dx


def _axis_scatter_sum(d, idx, src_len, axis):
    moved = np.moveaxis(d, axis, 0)
    out = np.zeros((src_len,) + moved.shape[1:], dtype=d.dtype)
    np.add.at(out, idx, moved)
    return np.moveaxis(out, 0, axis)


class NearestResize3d(Module):
    """Nearest-neighbor resize of the three spatial axes to a target shape.

    Shape-exact inverse of pooling in the decoder: handles odd sizes the
    floor-halving pools produce (e.g. restoring 9 from 4).
    """

    def __init__(self):
        super().__init__()
        self._cache = None

    @staticmethod
    def _index_map(src: int, dst: int) -> np.ndarray:
        return np.minimum((np.arange(dst) * src) // dst, src - 1)

    def forward_to(self, x, target_shape, ctx):
        sx, sy, sz = x.shape[2:]
        tx, ty, tz = target_shape
        ix = self._index_map(sx, tx)
        iy = self._index_map(sy, ty)
        iz = self._index_map(sz, tz)
        self._cache = (x.shape, ix, iy, iz)
        return np.ascontiguousarray(
            x[:, :, ix[:, None, None], iy[None, :, None], iz[None, None, :]])

    def forward(self, x, ctx):
        raise NotImplementedError("use forward_to with an explicit target shape")

    def backward(self, dy):
        x_shape, ix, iy, iz = self._cache
        d = _axis_scatter_sum(dy, iz, x_shape[4], 4)
        d = _axis_scatter_sum(d, iy, x_shape[3], 3)
        return _axis_scatter_sum(d, ix, x_shape[2], 2)
