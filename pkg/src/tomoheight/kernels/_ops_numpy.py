"""Pure-NumPy 3D convolution kernels (fallback backend).

Implemented as a loop over the (kx, ky, kz) kernel offsets, each offset
contributing one strided-slice einsum that BLAS turns into a matmul.  This
keeps memory at O(input) instead of materializing full im2col columns.

Conventions (shared with the compiled backend):
    x  (N, C, X, Y, Z)    input volumes
    w  (O, C, kx, ky, kz) filters
    y  (N, O, Ox, Oy, Oz) with Od = (D + 2*pad - k) // stride + 1
"""

from __future__ import annotations

import numpy as np


def out_shape(in_shape, kshape, stride, pad):
    return tuple((d + 2 * p - k) // s + 1
                 for d, k, s, p in zip(in_shape, kshape, stride, pad))


def _pad_input(x, pad):
    px, py, pz = pad
    if px == 0 and py == 0 and pz == 0:
        return x
    return np.pad(x, [(0, 0), (0, 0), (px, px), (py, py), (pz, pz)])


def _offset_view(xp, offset, stride, oshape):
    dx, dy, dz = offset
    sx, sy, sz = stride
    ox, oy, oz = oshape
    return xp[:, :, dx:dx + sx * ox:sx, dy:dy + sy * oy:sy, dz:dz + sz * oz:sz]


def conv3d_forward(x, w, stride, pad):
    n, c = x.shape[:2]
    o = w.shape[0]
    kshape = w.shape[2:]
    oshape = out_shape(x.shape[2:], kshape, stride, pad)
    xp = _pad_input(x, pad)
    y = np.zeros((n, o) + oshape, dtype=x.dtype)
    for dx in range(kshape[0]):
        for dy in range(kshape[1]):
            for dz in range(kshape[2]):
                view = _offset_view(xp, (dx, dy, dz), stride, oshape)
                y += np.einsum("ncxyz,oc->noxyz", view, w[:, :, dx, dy, dz],
                               optimize=True)
    return y


def conv3d_backward_data(dy, w, x_shape, stride, pad):
    kshape = w.shape[2:]
    oshape = dy.shape[2:]
    px, py, pz = pad
    padded_shape = (x_shape[0], x_shape[1],
                    x_shape[2] + 2 * px, x_shape[3] + 2 * py, x_shape[4] + 2 * pz)
    dxp = np.zeros(padded_shape, dtype=dy.dtype)
    sx, sy, sz = stride
    ox, oy, oz = oshape
    for dx in range(kshape[0]):
        for dyk in range(kshape[1]):
            for dz in range(kshape[2]):
                contrib = np.einsum("noxyz,oc->ncxyz", dy, w[:, :, dx, dyk, dz],
                                    optimize=True)
                dxp[:, :, dx:dx + sx * ox:sx, dyk:dyk + sy * oy:sy,
                    dz:dz + sz * oz:sz] += contrib
    if px == 0 and py == 0 and pz == 0:
        return dxp
    return np.ascontiguousarray(
        dxp[:, :, px:padded_shape[2] - px, py:padded_shape[3] - py,
            pz:padded_shape[4] - pz])


def conv3d_backward_weights(x, dy, w_shape, stride, pad):
    kshape = w_shape[2:]
    oshape = dy.shape[2:]
    xp = _pad_input(x, pad)
    dw = np.zeros(w_shape, dtype=x.dtype)
    for dx in range(kshape[0]):
        for dyk in range(kshape[1]):
            for dz in range(kshape[2]):
                view = _offset_view(xp, (dx, dyk, dz), stride, oshape)
                dw[:, :, dx, dyk, dz] = np.einsum("noxyz,ncxyz->oc", dy, view,
                                                  optimize=True)
    return dw
