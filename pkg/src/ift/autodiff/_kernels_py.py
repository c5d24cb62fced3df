"""Pure-numpy versions of the hot kernels.

Accumulation order matches ``_ckernels.pyx`` element for element, so both
backends produce bit-identical results.
"""

import numpy as np


def im2col(x, kh, kw, stride, pad):
    """Lower ``x[B,C,H,W]`` to columns ``[B,C,kh,kw,Ho,Wo]``."""
    B, C, H, W = x.shape
    Ho = (H + 2 * pad - kh) // stride + 1
    Wo = (W + 2 * pad - kw) // stride + 1
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((B, C, kh, kw, Ho, Wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = x[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride]
    return cols


def col2im(cols, H, W, stride, pad):
    """Adjoint of :func:`im2col`; overlapping windows are summed."""
    B, C, kh, kw, Ho, Wo = cols.shape
    out = np.zeros((B, C, H + 2 * pad, W + 2 * pad), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += cols[:, :, i, j]
    if pad:
        out = out[:, :, pad:pad + H, pad:pad + W]
    return np.ascontiguousarray(out)


def scatter_add_rows(dst, idx, src):
    """``dst[idx[i]] += src[i]`` for i in increasing order, in place."""
    np.add.at(dst, idx, src)
    return dst
