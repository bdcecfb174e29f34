# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled 3D convolution kernels (hot path of the volumetric networks).

Unit-stride convolutions (the bulk of training time) use an (n, x, y)-outer
ordering whose inner loops are contiguous z-row AXPY/dot operations that
vectorize and stay in L1; strided convolutions fall back to generic
weight-stationary loops.  Array contracts match `_ops_numpy`:
x (N,C,X,Y,Z), w (O,C,kx,ky,kz).
"""

import numpy as np

ctypedef fused real:
    float
    double


def conv3d_forward(x, w, stride, pad):
    xp = _pad_input(np.ascontiguousarray(x), pad)
    oshape = _out_shape(x.shape[2:], w.shape[2:], stride, pad)
    y = np.zeros((x.shape[0], w.shape[0]) + oshape, dtype=x.dtype)
    w = np.ascontiguousarray(w)
    if stride == (1, 1, 1):
        _forward_unit(xp, w, y)
    else:
        _forward_generic(xp, w, y, stride[0], stride[1], stride[2])
    return y


def conv3d_backward_data(dy, w, x_shape, stride, pad):
    px, py, pz = pad
    padded = np.zeros((x_shape[0], x_shape[1], x_shape[2] + 2 * px,
                       x_shape[3] + 2 * py, x_shape[4] + 2 * pz), dtype=dy.dtype)
    dy = np.ascontiguousarray(dy)
    w = np.ascontiguousarray(w)
    if stride == (1, 1, 1):
        _backward_data_unit(dy, w, padded)
    else:
        _backward_data_generic(dy, w, padded, stride[0], stride[1], stride[2])
    if px == 0 and py == 0 and pz == 0:
        return padded
    return np.ascontiguousarray(
        padded[:, :, px:padded.shape[2] - px, py:padded.shape[3] - py,
               pz:padded.shape[4] - pz])


def conv3d_backward_weights(x, dy, w_shape, stride, pad):
    xp = _pad_input(np.ascontiguousarray(x), pad)
    dw = np.zeros(w_shape, dtype=x.dtype)
    dy = np.ascontiguousarray(dy)
    if stride == (1, 1, 1):
        _backward_weights_unit(xp, dy, dw)
    else:
        _backward_weights_generic(xp, dy, dw, stride[0], stride[1], stride[2])
    return dw


def _out_shape(in_shape, kshape, stride, pad):
    return tuple((d + 2 * p - k) // s + 1
                 for d, k, s, p in zip(in_shape, kshape, stride, pad))


def _pad_input(x, pad):
    px, py, pz = pad
    if px == 0 and py == 0 and pz == 0:
        return x
    return np.pad(x, [(0, 0), (0, 0), (px, px), (py, py), (pz, pz)])


# -- unit-stride fast paths ---------------------------------------------------

def _forward_unit(real[:, :, :, :, ::1] xp, real[:, :, :, :, ::1] w,
                  real[:, :, :, :, ::1] y):
    cdef Py_ssize_t N = y.shape[0], O = y.shape[1]
    cdef Py_ssize_t OX = y.shape[2], OY = y.shape[3], OZ = y.shape[4]
    cdef Py_ssize_t C = w.shape[1], KX = w.shape[2], KY = w.shape[3], KZ = w.shape[4]
    cdef Py_ssize_t n, o, c, i, j, k, ox, oy, oz
    cdef real wv
    cdef real* yrow
    cdef const real* xrow
    with nogil:
        for n in range(N):
            for ox in range(OX):
                for oy in range(OY):
                    for c in range(C):
                        for i in range(KX):
                            for j in range(KY):
                                xrow = &xp[n, c, ox + i, oy + j, 0]
                                for o in range(O):
                                    yrow = &y[n, o, ox, oy, 0]
                                    for k in range(KZ):
                                        wv = w[o, c, i, j, k]
                                        for oz in range(OZ):
                                            yrow[oz] += wv * xrow[k + oz]


def _backward_data_unit(real[:, :, :, :, ::1] dy, real[:, :, :, :, ::1] w,
                        real[:, :, :, :, ::1] dxp):
    cdef Py_ssize_t N = dy.shape[0], O = dy.shape[1]
    cdef Py_ssize_t OX = dy.shape[2], OY = dy.shape[3], OZ = dy.shape[4]
    cdef Py_ssize_t C = w.shape[1], KX = w.shape[2], KY = w.shape[3], KZ = w.shape[4]
    cdef Py_ssize_t n, o, c, i, j, k, ox, oy, oz
    cdef real wv
    cdef real* drow
    cdef const real* gyrow
    with nogil:
        for n in range(N):
            for ox in range(OX):
                for oy in range(OY):
                    for c in range(C):
                        for i in range(KX):
                            for j in range(KY):
                                drow = &dxp[n, c, ox + i, oy + j, 0]
                                for o in range(O):
                                    gyrow = &dy[n, o, ox, oy, 0]
                                    for k in range(KZ):
                                        wv = w[o, c, i, j, k]
                                        for oz in range(OZ):
                                            drow[k + oz] += wv * gyrow[oz]


def _backward_weights_unit(real[:, :, :, :, ::1] xp, real[:, :, :, :, ::1] dy,
                           real[:, :, :, :, ::1] dw):
    cdef Py_ssize_t N = dy.shape[0], O = dy.shape[1]
    cdef Py_ssize_t OX = dy.shape[2], OY = dy.shape[3], OZ = dy.shape[4]
    cdef Py_ssize_t C = dw.shape[1], KX = dw.shape[2], KY = dw.shape[3], KZ = dw.shape[4]
    cdef Py_ssize_t n, o, c, i, j, k, ox, oy, oz
    cdef real acc
    cdef const real* xrow
    cdef const real* gyrow
    with nogil:
        for n in range(N):
            for ox in range(OX):
                for oy in range(OY):
                    for c in range(C):
                        for i in range(KX):
                            for j in range(KY):
                                xrow = &xp[n, c, ox + i, oy + j, 0]
                                for o in range(O):
                                    gyrow = &dy[n, o, ox, oy, 0]
                                    for k in range(KZ):
                                        acc = 0
                                        for oz in range(OZ):
                                            acc += gyrow[oz] * xrow[k + oz]
                                        dw[o, c, i, j, k] += acc


# -- generic strided paths ----------------------------------------------------

def _forward_generic(real[:, :, :, :, ::1] xp, real[:, :, :, :, ::1] w,
                     real[:, :, :, :, ::1] y,
                     Py_ssize_t sx, Py_ssize_t sy, Py_ssize_t sz):
    cdef Py_ssize_t N = y.shape[0], O = y.shape[1]
    cdef Py_ssize_t OX = y.shape[2], OY = y.shape[3], OZ = y.shape[4]
    cdef Py_ssize_t C = w.shape[1], KX = w.shape[2], KY = w.shape[3], KZ = w.shape[4]
    cdef Py_ssize_t n, o, c, i, j, k, ox, oy, oz
    cdef real wv
    with nogil:
        for n in range(N):
            for o in range(O):
                for c in range(C):
                    for i in range(KX):
                        for j in range(KY):
                            for k in range(KZ):
                                wv = w[o, c, i, j, k]
                                if wv == 0:
                                    continue
                                for ox in range(OX):
                                    for oy in range(OY):
                                        for oz in range(OZ):
                                            y[n, o, ox, oy, oz] += wv * xp[
                                                n, c, ox * sx + i, oy * sy + j, oz * sz + k]


def _backward_data_generic(real[:, :, :, :, ::1] dy, real[:, :, :, :, ::1] w,
                           real[:, :, :, :, ::1] dxp,
                           Py_ssize_t sx, Py_ssize_t sy, Py_ssize_t sz):
    cdef Py_ssize_t N = dy.shape[0], O = dy.shape[1]
    cdef Py_ssize_t OX = dy.shape[2], OY = dy.shape[3], OZ = dy.shape[4]
    cdef Py_ssize_t C = w.shape[1], KX = w.shape[2], KY = w.shape[3], KZ = w.shape[4]
    cdef Py_ssize_t n, o, c, i, j, k, ox, oy, oz
    cdef real wv
    with nogil:
        for n in range(N):
            for o in range(O):
                for c in range(C):
                    for i in range(KX):
                        for j in range(KY):
                            for k in range(KZ):
                                wv = w[o, c, i, j, k]
                                if wv == 0:
                                    continue
                                for ox in range(OX):
                                    for oy in range(OY):
                                        for oz in range(OZ):
                                            dxp[n, c, ox * sx + i, oy * sy + j,
                                                oz * sz + k] += wv * dy[n, o, ox, oy, oz]


def _backward_weights_generic(real[:, :, :, :, ::1] xp, real[:, :, :, :, ::1] dy,
                              real[:, :, :, :, ::1] dw,
                              Py_ssize_t sx, Py_ssize_t sy, Py_ssize_t sz):
    cdef Py_ssize_t N = dy.shape[0], O = dy.shape[1]
    cdef Py_ssize_t OX = dy.shape[2], OY = dy.shape[3], OZ = dy.shape[4]
    cdef Py_ssize_t C = dw.shape[1], KX = dw.shape[2], KY = dw.shape[3], KZ = dw.shape[4]
    cdef Py_ssize_t n, o, c, i, j, k, ox, oy, oz
    cdef real acc
    with nogil:
        for o in range(O):
            for c in range(C):
                for i in range(KX):
                    for j in range(KY):
                        for k in range(KZ):
                            acc = 0
                            for n in range(N):
                                for ox in range(OX):
                                    for oy in range(OY):
                                        for oz in range(OZ):
                                            acc += dy[n, o, ox, oy, oz] * xp[
                                                n, c, ox * sx + i, oy * sy + j, oz * sz + k]
                            dw[o, c, i, j, k] += acc
