"""Pure-numpy conv2d kernels (im2col via strided windows).

Same signatures as the compiled ``_kernels`` extension; used when the
extension is not built or ``FLSIM_PURE_PYTHON=1`` is set.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _windows(x, kh, kw, sh, sw, pt, pb, pl, pr):
    xp = np.pad(x, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    # [n, C, Ho, Wo, kh, kw]
    return sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]


def conv2d_forward(x, w, b, sh, sw, pt, pb, pl, pr):
    kh, kw = w.shape[2], w.shape[3]
    win = _windows(x, kh, kw, sh, sw, pt, pb, pl, pr)
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))  # [n, Ho, Wo, O]
    out = out.transpose(0, 3, 1, 2) + b[None, :, None, None]
    return np.ascontiguousarray(out, dtype=x.dtype)


def conv2d_backward(x, w, dout, sh, sw, pt, pb, pl, pr):
    n, C, H, W = x.shape
    kh, kw = w.shape[2], w.shape[3]
    Ho, Wo = dout.shape[2], dout.shape[3]
    win = _windows(x, kh, kw, sh, sw, pt, pb, pl, pr)
    dw = np.tensordot(dout, win, axes=([0, 2, 3], [0, 2, 3]))  # [O, C, kh, kw]
    db = dout.sum(axis=(0, 2, 3))
    dcols = np.tensordot(dout, w, axes=([1], [0]))  # [n, Ho, Wo, C, kh, kw]
    dxp = np.zeros((n, C, H + pt + pb, W + pl + pr), dtype=x.dtype)
    for ki in range(kh):
        for kj in range(kw):
            dxp[:, :, ki:ki + sh * Ho:sh, kj:kj + sw * Wo:sw] += dcols[..., ki, kj].transpose(0, 3, 1, 2)
    dx = dxp[:, :, pt:pt + H, pl:pl + W]
    return (np.ascontiguousarray(dx, dtype=x.dtype),
            dw.astype(x.dtype, copy=False), db.astype(x.dtype, copy=False))


def fnv1a_32(buf):
    h = 0x811C9DC5
    for b in memoryview(buf).cast("B"):
        h = ((h ^ b) * 0x01000193) & 0xFFFFFFFF
    return h
