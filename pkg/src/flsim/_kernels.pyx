# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled conv2d kernels.

Patch extraction (im2col) and its adjoint scatter-add (col2im) run as typed
loops; the channel contraction goes through BLAS via ``np.matmul``.
"""

import numpy as np
cimport numpy as cnp

ctypedef fused real:
    float
    double


def im2col(real[:, :, :, ::1] x, Py_ssize_t kh, Py_ssize_t kw, int sh, int sw,
           int pt, int pl, Py_ssize_t Ho, Py_ssize_t Wo):
    """Return patches of shape [n, C*kh*kw, Ho*Wo]; out-of-bounds taps are zero."""
    cdef Py_ssize_t n = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    dtype = np.float32 if real is float else np.float64
    cols_arr = np.zeros((n, C * kh * kw, Ho * Wo), dtype=dtype)
    cdef real[:, :, ::1] cols = cols_arr
    cdef Py_ssize_t s, c, ki, kj, i, j, r, row, col
    with nogil:
        for s in range(n):
            for c in range(C):
                for ki in range(kh):
                    for kj in range(kw):
                        r = (c * kh + ki) * kw + kj
                        for i in range(Ho):
                            row = i * sh + ki - pt
                            if row < 0 or row >= H:
                                continue
                            for j in range(Wo):
                                col = j * sw + kj - pl
                                if col >= 0 and col < W:
                                    cols[s, r, i * Wo + j] = x[s, c, row, col]
    return cols_arr


def col2im(real[:, :, ::1] dcols, Py_ssize_t C, Py_ssize_t H, Py_ssize_t W,
           Py_ssize_t kh, Py_ssize_t kw, int sh, int sw, int pt, int pl,
           Py_ssize_t Ho, Py_ssize_t Wo):
    """Adjoint of :func:`im2col`: scatter-add patch gradients into [n, C, H, W]."""
    cdef Py_ssize_t n = dcols.shape[0]
    dtype = np.float32 if real is float else np.float64
    dx_arr = np.zeros((n, C, H, W), dtype=dtype)
    cdef real[:, :, :, ::1] dx = dx_arr
    cdef Py_ssize_t s, c, ki, kj, i, j, r, row, col
    with nogil:
        for s in range(n):
            for c in range(C):
                for ki in range(kh):
                    for kj in range(kw):
                        r = (c * kh + ki) * kw + kj
                        for i in range(Ho):
                            row = i * sh + ki - pt
                            if row < 0 or row >= H:
                                continue
                            for j in range(Wo):
                                col = j * sw + kj - pl
                                if col >= 0 and col < W:
                                    dx[s, c, row, col] += dcols[s, r, i * Wo + j]
    return dx_arr


def conv2d_forward(x, w, b, int sh, int sw, int pt, int pb, int pl, int pr):
    n, C, H, W = x.shape
    O, _, kh, kw = w.shape
    Ho = (H + pt + pb - kh) // sh + 1
    Wo = (W + pl + pr - kw) // sw + 1
    cols = im2col(x, kh, kw, sh, sw, pt, pl, Ho, Wo)
    out = np.matmul(w.reshape(O, -1), cols)  # [n, O, Ho*Wo]
    out += b[None, :, None]
    return out.reshape(n, O, Ho, Wo)


def conv2d_backward(x, w, dout, int sh, int sw, int pt, int pb, int pl, int pr):
    n, C, H, W = x.shape
    O, _, kh, kw = w.shape
    Ho, Wo = dout.shape[2], dout.shape[3]
    cols = im2col(x, kh, kw, sh, sw, pt, pl, Ho, Wo)
    d2 = np.ascontiguousarray(dout).reshape(n, O, Ho * Wo)
    dw = np.tensordot(d2, cols, axes=([0, 2], [0, 2])).reshape(w.shape)
    db = d2.sum(axis=(0, 2))
    dcols = np.ascontiguousarray(np.matmul(w.reshape(O, -1).T, d2))
    dx = col2im(dcols, C, H, W, kh, kw, sh, sw, pt, pl, Ho, Wo)
    return dx, dw.astype(x.dtype, copy=False), db.astype(x.dtype, copy=False)


def fnv1a_32(const unsigned char[::1] buf):
    cdef unsigned int h = 0x811C9DC5
    cdef Py_ssize_t i
    with nogil:
        for i in range(buf.shape[0]):
            h = (h ^ buf[i]) * 0x01000193
    return h
