"""Convolution lowering kernels.

The compiled extension ``gradforge._kernels`` is used when importable;
otherwise the numpy implementations below are used. Setting the environment
variable ``GRADFORGE_PURE=1`` forces the numpy path. Both paths produce
bitwise-identical results.
"""
import os

import numpy as np


def same_padding(size: int, k: int, stride: int) -> tuple[int, int]:
    """Return (output size, leading pad) for zero 'same' padding."""
    out = -(-size // stride)
    total = max((out - 1) * stride + k - size, 0)
    return out, total // 2


def im2col_numpy(x, k, stride, pad_h, pad_w, ho, wo):
    n, h, w, c = x.shape
    hp = max(h + 2 * pad_h, (ho - 1) * stride + k)
    wp = max(w + 2 * pad_w, (wo - 1) * stride + k)
    xp = np.zeros((n, hp, wp, c))
    xp[:, pad_h:pad_h + h, pad_w:pad_w + w, :] = x
    cols = np.empty((n, ho, wo, k, k, c))
    for di in range(k):
        for dj in range(k):
            cols[:, :, :, di, dj, :] = xp[:, di:di + stride * ho:stride, dj:dj + stride * wo:stride, :]
    return cols


def col2im_numpy(cols, h, w, stride, pad_h, pad_w):
    n, ho, wo, k, _, c = cols.shape
    hp = max(h + 2 * pad_h, (ho - 1) * stride + k)
    wp = max(w + 2 * pad_w, (wo - 1) * stride + k)
    xp = np.zeros((n, hp, wp, c))
    for di in range(k):
        for dj in range(k):
            xp[:, di:di + stride * ho:stride, dj:dj + stride * wo:stride, :] += cols[:, :, :, di, dj, :]
    return np.ascontiguousarray(xp[:, pad_h:pad_h + h, pad_w:pad_w + w, :])


try:
    if os.environ.get("GRADFORGE_PURE", "") not in ("", "0"):
        raise ImportError("pure mode requested")
    from gradforge import _kernels as _compiled
except ImportError:
    _compiled = None

BACKEND = "numpy" if _compiled is None else "cython"


def im2col(x, k, stride, pad_h, pad_w, ho, wo):
    """[N,H,W,C] -> [N,Ho,Wo,k,k,C] patches; taps outside the image are zero."""
    if _compiled is None:
        return im2col_numpy(x, k, stride, pad_h, pad_w, ho, wo)
    return _compiled.im2col(np.ascontiguousarray(x, dtype=np.float64), k, stride, pad_h, pad_w, ho, wo)


def col2im(cols, h, w, stride, pad_h, pad_w):
    """Adjoint of :func:`im2col`: scatter-add patches back to [N,H,W,C]."""
    if _compiled is None:
        return col2im_numpy(cols, h, w, stride, pad_h, pad_w)
    return _compiled.col2im(np.ascontiguousarray(cols, dtype=np.float64), h, w, stride, pad_h, pad_w)
