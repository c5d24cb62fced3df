# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled versions of the conv lowering and row scatter kernels.

Loop nesting keeps the per-element accumulation order of the numpy fallback
so results are bit-identical across backends.
"""

import numpy as np
cimport numpy as cnp
from libc.string cimport memcpy, memset

ctypedef fused real:
    float
    double


cdef inline void _lower_plane(const real* src, real* dst, Py_ssize_t H, Py_ssize_t W,
                              Py_ssize_t Ho, Py_ssize_t Wo, int i, int j,
                              int stride, int pad) noexcept nogil:
    cdef Py_ssize_t oh, ow, ih, iw, lo, hi
    cdef real* row
    cdef const real* srow
    # valid output columns for this kernel column j
    lo = 0
    while lo < Wo and lo * stride + j - pad < 0:
        lo += 1
    hi = Wo
    while hi > lo and (hi - 1) * stride + j - pad >= W:
        hi -= 1
    for oh in range(Ho):
        row = dst + oh * Wo
        ih = oh * stride + i - pad
        if ih < 0 or ih >= H:
            memset(row, 0, Wo * sizeof(real))
            continue
        srow = src + ih * W
        for ow in range(lo):
            row[ow] = 0
        if stride == 1:
            memcpy(row + lo, srow + lo + j - pad, (hi - lo) * sizeof(real))
        else:
            for ow in range(lo, hi):
                row[ow] = srow[ow * stride + j - pad]
        for ow in range(hi, Wo):
            row[ow] = 0


cdef inline void _raise_plane(const real* src, real* dst, Py_ssize_t H, Py_ssize_t W,
                              Py_ssize_t Ho, Py_ssize_t Wo, int i, int j,
                              int stride, int pad) noexcept nogil:
    cdef Py_ssize_t oh, ow, ih, lo, hi
    cdef real* drow
    cdef const real* srow
    lo = 0
    while lo < Wo and lo * stride + j - pad < 0:
        lo += 1
    hi = Wo
    while hi > lo and (hi - 1) * stride + j - pad >= W:
        hi -= 1
    for oh in range(Ho):
        ih = oh * stride + i - pad
        if ih < 0 or ih >= H:
            continue
        drow = dst + ih * W + j - pad
        srow = src + oh * Wo
        if stride == 1:
            for ow in range(lo, hi):
                drow[ow] += srow[ow]
        else:
            for ow in range(lo, hi):
                drow[ow * stride] += srow[ow]


def im2col(const real[:, :, :, ::1] x, int kh, int kw, int stride, int pad):
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t Ho = (H + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t Wo = (W + 2 * pad - kw) // stride + 1
    dtype = np.float32 if real is float else np.float64
    out = np.empty((B, C, kh, kw, Ho, Wo), dtype=dtype)
    cdef real[:, :, :, :, :, ::1] cols = out
    cdef Py_ssize_t b, c
    cdef int i, j
    if out.size == 0:
        return out
    with nogil:
        for b in range(B):
            for c in range(C):
                for i in range(kh):
                    for j in range(kw):
                        _lower_plane(&x[b, c, 0, 0], &cols[b, c, i, j, 0, 0],
                                     H, W, Ho, Wo, i, j, stride, pad)
    return out


def col2im(const real[:, :, :, :, :, ::1] cols, int H, int W, int stride, int pad):
    cdef Py_ssize_t B = cols.shape[0], C = cols.shape[1]
    cdef int kh = cols.shape[2], kw = cols.shape[3]
    cdef Py_ssize_t Ho = cols.shape[4], Wo = cols.shape[5]
    dtype = np.float32 if real is float else np.float64
    out = np.zeros((B, C, H, W), dtype=dtype)
    cdef real[:, :, :, ::1] o = out
    cdef Py_ssize_t b, c
    cdef int i, j
    if cols.size == 0 or out.size == 0:
        return out
    with nogil:
        for b in range(B):
            for c in range(C):
                for i in range(kh):
                    for j in range(kw):
                        _raise_plane(&cols[b, c, i, j, 0, 0], &o[b, c, 0, 0],
                                     H, W, Ho, Wo, i, j, stride, pad)
    return out


def scatter_add_rows(real[:, ::1] dst, const cnp.int64_t[::1] idx, const real[:, ::1] src):
    cdef Py_ssize_t n = idx.shape[0], d = src.shape[1], i, k
    cdef real* drow
    cdef const real* srow
    if n == 0 or d == 0:
        return np.asarray(dst)
    with nogil:
        for i in range(n):
            drow = &dst[idx[i], 0]
            srow = &src[i, 0]
            for k in range(d):
                drow[k] += srow[k]
    return np.asarray(dst)
