"""Differentiable primitives.

Every op computes its forward result with numpy, checks it for NaN/Inf,
and registers a closure mapping the output gradient to input gradients.
Broadcasting follows numpy's trailing-dimension alignment only.
"""

from __future__ import annotations

import numpy as np

from . import kernels
from .tensor import Tensor, make_result


class ShapeError(ValueError):
    """Operand shapes are incompatible with the op's contract."""


def _t(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if like is not None:
        return Tensor(np.asarray(x, dtype=like.dtype))
    return Tensor(x)


def _pair(a, b):
    if isinstance(a, Tensor):
        return a, _t(b, a)
    b = _t(b)
    return _t(a, b), b


def unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == tuple(shape):
        return g
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------- arithmetic


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("add", a, b)

    def bw(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

    return make_result("add", a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("sub", a, b)

    def bw(g):
        return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)

    return make_result("sub", a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("mul", a, b)

    def bw(g):
        ga = unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_result("mul", a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("div", a, b)
    if not np.all(b.data):
        raise ZeroDivisionError("div: division by zero")
    out = a.data / b.data

    def bw(g):
        ga = unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_result("div", out, (a, b), bw)


def neg(x) -> Tensor:
    x = _t(x)
    return make_result("neg", -x.data, (x,), lambda g: (-g,))


def pow(x, p) -> Tensor:
    x = _t(x)
    if isinstance(p, Tensor):
        raise TypeError("pow: exponent must be a scalar")
    p = float(p)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = x.data ** x.dtype.type(p)

    def bw(g):
        return (g * p * x.data ** x.dtype.type(p - 1.0),)

    return make_result("pow", out, (x,), bw)


def exp(x) -> Tensor:
    x = _t(x)
    with np.errstate(over="ignore"):
        out = np.exp(x.data)
    return make_result("exp", out, (x,), lambda g: (g * out,))


def log(x) -> Tensor:
    x = _t(x)
    if np.any(x.data <= 0):
        raise ValueError("log: non-positive input")
    out = np.log(x.data)
    return make_result("log", out, (x,), lambda g: (g / x.data,))


def sqrt(x) -> Tensor:
    x = _t(x)
    if np.any(x.data < 0):
        raise ValueError("sqrt: negative input")
    out = np.sqrt(x.data)
    return make_result("sqrt", out, (x,), lambda g: (g * 0.5 / out,))


def abs(x) -> Tensor:
    x = _t(x)
    return make_result("abs", np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))


def elu(x, alpha: float = 1.0) -> Tensor:
    """``x`` for ``x > 0``, ``alpha*(e^x - 1)`` otherwise."""
    x = _t(x)
    pos = x.data > 0
    neg_part = np.expm1(np.minimum(x.data, 0))
    out = np.where(pos, x.data, alpha * neg_part).astype(x.dtype, copy=False)

    def bw(g):
        return (g * np.where(pos, 1, alpha * (neg_part + 1)).astype(x.dtype, copy=False),)

    return make_result("elu", out, (x,), bw)


def relu(x) -> Tensor:
    x = _t(x)
    mask = x.data > 0
    return make_result("relu", x.data * mask, (x,), lambda g: (g * mask,))


def sigmoid(x) -> Tensor:
    x = _t(x)
    z = np.exp(-np.abs(x.data))
    out = np.where(x.data >= 0, 1 / (1 + z), z / (1 + z)).astype(x.dtype, copy=False)
    return make_result("sigmoid", out, (x,), lambda g: (g * out * (1 - out),))


_UNARY = {"exp": exp, "log": log, "elu": elu, "relu": relu, "sigmoid": sigmoid,
          "neg": neg, "abs": abs, "sqrt": sqrt}
_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div}


def elementwise(x, f: str, y=None) -> Tensor:
    """Apply the named pointwise function; ``y`` is the second operand or exponent."""
    if f in _BINARY:
        return _BINARY[f](x, y)
    if f == "pow":
        return pow(x, y)
    if f in _UNARY:
        return _UNARY[f](x)
    raise ValueError(f"unknown elementwise function {f!r}")


# ------------------------------------------------------------------- linear


def matmul(a, b) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch dims {a.shape[:-2]} and {b.shape[:-2]} do not broadcast") from None
    out = np.matmul(a.data, b.data)

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return make_result("matmul", out, (a, b), bw)


def linear(x, w, b=None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else add(y, b)


# --------------------------------------------------------------- reductions


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    out = []
    for ax in axis:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"axis {ax} out of range for rank {ndim}")
        out.append(ax % ndim)
    return tuple(out)


def _expand_grad(g, shape, axes, keepdims):
    if not keepdims:
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def sum(x, axis=None, keepdims=False) -> Tensor:
    x = _t(x)
    axes = _norm_axis(axis, x.ndim)
    if any(x.shape[a] == 0 for a in axes):
        raise ShapeError("sum: empty axis")
    out = np.sum(x.data, axis=axes, keepdims=keepdims)
    return make_result("sum", np.asarray(out), (x,),
                       lambda g: (_expand_grad(g, x.shape, axes, keepdims),))


def mean(x, axis=None, keepdims=False) -> Tensor:
    x = _t(x)
    axes = _norm_axis(axis, x.ndim)
    n = int(np.prod([x.shape[a] for a in axes]))
    if n == 0:
        raise ShapeError("mean: empty axis")
    out = np.mean(x.data, axis=axes, keepdims=keepdims)

    def bw(g):
        return (_expand_grad(g, x.shape, axes, keepdims) / x.dtype.type(n),)

    return make_result("mean", np.asarray(out), (x,), bw)


def max(x, axis: int, keepdims=False) -> Tensor:
    """Maximum along one axis; the gradient goes to the first maximal entry."""
    x = _t(x)
    (ax,) = _norm_axis(axis, x.ndim)
    if x.shape[ax] == 0:
        raise ShapeError("max: empty axis")
    idx = np.expand_dims(np.argmax(x.data, axis=ax), ax)
    out = np.take_along_axis(x.data, idx, axis=ax)

    def bw(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, idx, g if keepdims else np.expand_dims(g, ax), axis=ax)
        return (gx,)

    return make_result("max", out if keepdims else np.squeeze(out, ax), (x,), bw)


def argmax(x, axis: int = -1) -> np.ndarray:
    """Index of the maximum along ``axis``; ties resolve to the lowest index.

    Not differentiable: returns a plain integer array.
    """
    data = x.data if isinstance(x, Tensor) else np.asarray(x)
    (ax,) = _norm_axis(axis, data.ndim)
    if data.shape[ax] == 0:
        raise ShapeError("argmax: empty axis")
    return np.argmax(data, axis=ax).astype(np.int64)


def reduce(x, op: str, axis=None, keepdims=False):
    if op == "sum":
        return sum(x, axis, keepdims)
    if op == "mean":
        return mean(x, axis, keepdims)
    if op == "max":
        return max(x, axis, keepdims)
    if op == "argmax":
        return argmax(x, -1 if axis is None else axis)
    raise ValueError(f"unknown reduction {op!r}")


def softmax(x, axis: int = -1) -> Tensor:
    x = _t(x)
    (ax,) = _norm_axis(axis, x.ndim)
    z = x.data - np.max(x.data, axis=ax, keepdims=True)
    e = np.exp(z)
    out = e / np.sum(e, axis=ax, keepdims=True)

    def bw(g):
        return (out * (g - np.sum(g * out, axis=ax, keepdims=True)),)

    return make_result("softmax", out, (x,), bw)


def layer_norm(x, axis: int = -1, eps: float = 1e-5) -> Tensor:
    """Normalize to zero mean / unit variance along ``axis`` (no affine)."""
    x = _t(x)
    (ax,) = _norm_axis(axis, x.ndim)
    mu = np.mean(x.data, axis=ax, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt(np.mean(xc * xc, axis=ax, keepdims=True) + eps)
    out = xc * inv

    def bw(g):
        gm = np.mean(g, axis=ax, keepdims=True)
        gxm = np.mean(g * out, axis=ax, keepdims=True)
        return (inv * (g - gm - out * gxm),)

    return make_result("layer_norm", out.astype(x.dtype, copy=False), (x,), bw)


# -------------------------------------------------------------------- shape


def reshape(x, shape) -> Tensor:
    x = _t(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {x.shape} to {tuple(shape)}") from None
    return make_result("reshape", out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes=None) -> Tensor:
    x = _t(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return make_result("transpose", np.transpose(x.data, axes), (x,),
                       lambda g: (np.transpose(g, inv),))


def swapaxes(x, a: int, b: int) -> Tensor:
    axes = list(range(_t(x).ndim))
    axes[a], axes[b] = axes[b], axes[a]
    return transpose(x, axes)


def _is_basic(key) -> bool:
    keys = key if isinstance(key, tuple) else (key,)
    return all(k is None or k is Ellipsis or isinstance(k, (int, slice, np.integer)) for k in keys)


def getitem(x, key) -> Tensor:
    x = _t(x)
    if isinstance(key, Tensor):
        key = key.data
    out = x.data[key]
    basic = _is_basic(key)

    def bw(g):
        gx = np.zeros_like(x.data)
        if basic:
            gx[key] = g
        else:
            np.add.at(gx, key, g)
        return (gx,)

    return make_result("getitem", np.array(out, copy=True), (x,), bw)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_t(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat: no inputs")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise ShapeError(f"concat: {e}") from None
    ax = axis % out.ndim
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=ax))

    return make_result("concat", out, tuple(tensors), bw)


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = [_t(t) for t in tensors]
    return concat([expand_dims(t, axis) for t in tensors], axis)


def expand_dims(x, axis: int) -> Tensor:
    x = _t(x)
    return reshape(x, np.expand_dims(x.data, axis).shape)


# -------------------------------------------------------------- convolution


def conv2d(x, w, b=None, stride: int = 1, pad: int = 0) -> Tensor:
    """Zero-padded 2-D cross-correlation of ``x[B,Cin,H,W]`` with ``w[Cout,Cin,kh,kw]``."""
    x, w = _t(x), _t(w)
    if stride < 1:
        raise ValueError(f"conv2d: stride must be positive, got {stride}")
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-D input and weight, got {x.shape}, {w.shape}")
    B, Cin, H, W = x.shape
    Cout, Cin_w, kh, kw = w.shape
    if Cin != Cin_w:
        raise ShapeError(f"conv2d: input has {Cin} channels, weight expects {Cin_w}")
    if kh > H + 2 * pad or kw > W + 2 * pad:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {H + 2 * pad}x{W + 2 * pad}")
    Ho = (H + 2 * pad - kh) // stride + 1
    Wo = (W + 2 * pad - kw) // stride + 1
    data = x.data if x.data.flags.c_contiguous else np.ascontiguousarray(x.data)
    cols = kernels.im2col(data, kh, kw, stride, pad).reshape(B, Cin * kh * kw, Ho * Wo)
    wm = w.data.reshape(Cout, Cin * kh * kw)
    out = np.matmul(wm, cols)
    inputs = [x, w]
    if b is not None:
        b = _t(b)
        out += b.data.reshape(1, Cout, 1)
        inputs.append(b)

    def bw(g):
        g = g.reshape(B, Cout, Ho * Wo)
        gx = gw = None
        if x.requires_grad:
            gcols = np.matmul(wm.T, g).reshape(B, Cin, kh, kw, Ho, Wo)
            gx = kernels.col2im(gcols, H, W, stride, pad)
        if w.requires_grad:
            gw = np.matmul(g, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
        grads = [gx, gw]
        if b is not None:
            grads.append(g.sum(axis=(0, 2)))
        return tuple(grads)

    return make_result("conv2d", out.reshape(B, Cout, Ho, Wo), tuple(inputs), bw)


def avg_pool2d(x, k: int) -> Tensor:
    """Area-average downsample by an integer factor."""
    x = _t(x)
    B, C, H, W = x.shape
    if H % k or W % k:
        raise ShapeError(f"avg_pool2d: {H}x{W} not divisible by {k}")
    if k == 1:
        return x
    y = reshape(x, (B, C, H // k, k, W // k, k))
    return mean(y, axis=(3, 5))


def upsample_nearest(x, k: int) -> Tensor:
    x = _t(x)
    B, C, H, W = x.shape
    out = np.repeat(np.repeat(x.data, k, axis=2), k, axis=3)

    def bw(g):
        return (g.reshape(B, C, H, k, W, k).sum(axis=(3, 5)),)

    return make_result("upsample_nearest", out, (x,), bw)


# ------------------------------------------------------------------ patches


def patchify(x, patch: int) -> Tensor:
    """``[B,C,H,W]`` -> ``[B, (H/p)(W/p), C*p*p]`` non-overlapping row-major patches."""
    x = _t(x)
    B, C, H, W = x.shape
    if H % patch or W % patch:
        raise ShapeError(f"patchify: {H}x{W} not divisible by patch {patch}")
    gh, gw = H // patch, W // patch
    y = reshape(x, (B, C, gh, patch, gw, patch))
    y = transpose(y, (0, 2, 4, 1, 3, 5))
    return reshape(y, (B, gh * gw, C * patch * patch))


def unpatchify(t, C: int, H: int, W: int, patch: int) -> Tensor:
    """Inverse of :func:`patchify`."""
    t = _t(t)
    B = t.shape[0]
    gh, gw = H // patch, W // patch
    y = reshape(t, (B, gh, gw, C, patch, patch))
    y = transpose(y, (0, 3, 1, 4, 2, 5))
    return reshape(y, (B, C, H, W))


def gather_rows(t, idx) -> Tensor:
    """``out[b, i] = t[b, idx[b, i]]`` for ``t[B,n,D]``; gradient scatter-adds back."""
    t = _t(t)
    B, n, D = t.shape
    idx = np.asarray(idx, dtype=np.int64)
    if idx.ndim == 1:
        idx = np.broadcast_to(idx, (B, idx.shape[0]))
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"gather_rows: index out of range [0, {n})")
    out = np.stack([t.data[b, idx[b]] for b in range(B)])

    def bw(g):
        gt = np.zeros_like(t.data)
        for b in range(B):
            kernels.scatter_add_rows(gt[b], idx[b], np.ascontiguousarray(g[b]))
        return (gt,)

    return make_result("gather_rows", out, (t,), bw)


def gather_patches(x, idx, patch: int) -> Tensor:
    """Output patch ``i`` is input patch ``idx[i]`` on the ``patch``-sized grid."""
    x = _t(x)
    B, C, H, W = x.shape
    if H % patch or W % patch:
        raise ShapeError(f"gather_patches: {H}x{W} not divisible by patch {patch}")
    tokens = patchify(x, patch)
    return unpatchify(gather_rows(tokens, idx), C, H, W, patch)
