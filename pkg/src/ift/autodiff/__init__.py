"""Minimal dense tensor engine with reverse-mode differentiation."""

from . import ops, tenfile
from .kernels import BACKEND
from .ops import ShapeError
from .tensor import (
    Graph,
    Tensor,
    current_graph,
    default_dtype,
    get_default_dtype,
    is_grad_enabled,
    no_grad,
    parameter,
    set_default_dtype,
)


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf that ``loss`` depends on."""
    loss.backward()


__all__ = [
    "BACKEND",
    "Graph",
    "ShapeError",
    "Tensor",
    "backward",
    "current_graph",
    "default_dtype",
    "get_default_dtype",
    "is_grad_enabled",
    "no_grad",
    "ops",
    "parameter",
    "set_default_dtype",
    "tenfile",
]
