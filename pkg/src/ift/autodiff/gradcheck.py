"""Central finite-difference gradient checks."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Graph, Tensor, no_grad


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    """``||a - b|| / max(||a||, ||b||)``; 0 when both vanish."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(a - b) / denom)


def analytic_grads(fn: Callable[[], Tensor], inputs: Sequence[Tensor]) -> list[np.ndarray]:
    for t in inputs:
        t.grad = None
    with Graph() as g:
        loss = fn()
    g.backward(loss)
    return [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]


def numeric_grad(fn: Callable[[], Tensor], t: Tensor, eps: float = 1e-5, index=None) -> np.ndarray:
    """Central differences of scalar ``fn()`` w.r.t. ``t`` (all entries or the given flat indices)."""
    flat = t.data.reshape(-1)
    idxs = range(flat.size) if index is None else index
    out = np.zeros(flat.size if index is None else len(index))
    with no_grad():
        for k, i in enumerate(idxs):
            orig = flat[i]
            flat[i] = orig + eps
            fp = fn().item()
            flat[i] = orig - eps
            fm = fn().item()
            flat[i] = orig
            out[k] = (fp - fm) / (2 * eps)
    return out.reshape(t.shape) if index is None else out


def directional_grad(fn: Callable[[], Tensor], t: Tensor, direction: np.ndarray, eps: float = 1e-5) -> float:
    """Central difference of ``fn`` along ``direction`` in ``t``'s coordinates."""
    orig = t.data.copy()
    with no_grad():
        t.data[...] = orig + eps * direction
        fp = fn().item()
        t.data[...] = orig - eps * direction
        fm = fn().item()
    t.data[...] = orig
    return (fp - fm) / (2 * eps)


def check_gradients(fn: Callable[[], Tensor], inputs: Sequence[Tensor], eps: float = 1e-5) -> float:
    """Largest relative error over ``inputs`` between analytic and full numeric gradients."""
    grads = analytic_grads(fn, inputs)
    return max(rel_error(g, numeric_grad(fn, t, eps)) for g, t in zip(grads, inputs))
