"""Hot-kernel dispatch: compiled extension when built, numpy otherwise.

Set ``IFT_BACKEND=python`` to force the fallback.
"""

import os

import numpy as np

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("IFT_BACKEND", "").lower() != "python":
    try:
        from . import _ckernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:
        _impl = _kernels_py


def _native(a):
    return a.dtype in (np.float32, np.float64) and a.flags.c_contiguous


def im2col(x, kh, kw, stride, pad, backend=None):
    impl = _select(backend)
    if impl is not _kernels_py and not _native(x):
        x = np.ascontiguousarray(x, dtype=np.float64 if x.dtype != np.float32 else np.float32)
    return impl.im2col(x, kh, kw, stride, pad)


def col2im(cols, H, W, stride, pad, backend=None):
    impl = _select(backend)
    if impl is not _kernels_py and not _native(cols):
        cols = np.ascontiguousarray(cols)
    return impl.col2im(cols, H, W, stride, pad)


def scatter_add_rows(dst, idx, src, backend=None):
    impl = _select(backend)
    idx = np.ascontiguousarray(idx, dtype=np.int64)
    if impl is not _kernels_py:
        src = np.ascontiguousarray(src, dtype=dst.dtype)
    return impl.scatter_add_rows(dst, idx, src)


def _select(backend):
    if backend is None:
        return _impl
    if backend == "python":
        return _kernels_py
    if backend == "cython":
        if BACKEND != "cython":
            raise RuntimeError("compiled kernels are not available in this build")
        return _impl
    raise ValueError(f"unknown backend {backend!r}")
