"""Dense tensor with a tape-based reverse-mode gradient record."""

from __future__ import annotations

import contextlib
from typing import Callable, Optional, Sequence

import numpy as np

_DTYPES = (np.float32, np.float64)
_state = {"dtype": np.float32, "grad_enabled": True, "graphs": []}


def get_default_dtype():
    return _state["dtype"]


def set_default_dtype(dtype) -> None:
    dtype = np.dtype(dtype).type
    if dtype not in _DTYPES:
        raise TypeError(f"unsupported dtype {dtype}; expected float32 or float64")
    _state["dtype"] = dtype


@contextlib.contextmanager
def default_dtype(dtype):
    old = _state["dtype"]
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _state["dtype"] = old


@contextlib.contextmanager
def no_grad():
    old = _state["grad_enabled"]
    _state["grad_enabled"] = False
    try:
        yield
    finally:
        _state["grad_enabled"] = old


def is_grad_enabled() -> bool:
    return _state["grad_enabled"]


class Node:
    __slots__ = ("op", "inputs", "output", "backward")

    def __init__(self, op, inputs, output, backward):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Graph:
    """Ordered record of executed differentiable ops.

    Use as a context manager to make it the recording target; outside any
    ``with Graph()`` block ops record into a process-wide default graph.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.consumed = False

    def __enter__(self):
        _state["graphs"].append(self)
        return self

    def __exit__(self, *exc):
        _state["graphs"].pop()
        return False

    def record(self, node: Node) -> None:
        if self.consumed:
            raise RuntimeError("graph already consumed by backward(); call reset() first")
        self.nodes.append(node)

    def reset(self) -> None:
        self.nodes = []
        self.consumed = False

    def backward(self, loss: "Tensor") -> None:
        if self.consumed:
            raise RuntimeError("backward() called twice on the same graph without reset()")
        if loss.data.size != 1:
            raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")
        if not loss.requires_grad:
            raise ValueError("loss does not depend on any tensor that requires grad")
        self.consumed = True
        grads = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            in_grads = node.backward(g)
            for inp, gi in zip(node.inputs, in_grads):
                if gi is None or not inp.requires_grad:
                    continue
                if inp._node is None:
                    if inp.grad is None:
                        inp.grad = np.array(gi, dtype=inp.data.dtype, copy=True).reshape(inp.shape)
                    else:
                        inp.grad += gi
                else:
                    key = id(inp)
                    if key in grads:
                        grads[key] = grads[key] + gi
                    else:
                        grads[key] = gi
        # drop saved activations; the record is spent
        self.nodes = []


_default_graph = Graph()


def current_graph() -> Graph:
    return _state["graphs"][-1] if _state["graphs"] else _default_graph


def _as_array(data, dtype=None) -> np.ndarray:
    if isinstance(data, Tensor):
        data = data.data
    if dtype is not None:
        return np.asarray(data, dtype=dtype)
    if not isinstance(data, np.ndarray):
        arr = np.asarray(data)
        if arr.dtype.kind in "biuf":
            return arr.astype(_state["dtype"])
        return arr
    if data.dtype.kind == "f" and data.dtype.type not in _DTYPES:
        return data.astype(_state["dtype"])
    return data


class Tensor:
    """Row-major real array with an optional gradient accumulator."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_node", "_graph", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: Optional[str] = None):
        self.data = _as_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._node: Optional[Node] = None
        self._graph: Optional[Graph] = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        graph = self._graph if self._graph is not None else current_graph()
        graph.backward(self)

    def __repr__(self):
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{rg})"

    def __len__(self):
        return self.shape[0]

    # operator sugar; implementations live in ops
    def __add__(self, o):
        return _ops().add(self, o)

    def __radd__(self, o):
        return _ops().add(o, self)

    def __sub__(self, o):
        return _ops().sub(self, o)

    def __rsub__(self, o):
        return _ops().sub(o, self)

    def __mul__(self, o):
        return _ops().mul(self, o)

    def __rmul__(self, o):
        return _ops().mul(o, self)

    def __truediv__(self, o):
        return _ops().div(self, o)

    def __rtruediv__(self, o):
        return _ops().div(o, self)

    def __neg__(self):
        return _ops().neg(self)

    def __pow__(self, p):
        return _ops().pow(self, p)

    def __matmul__(self, o):
        return _ops().matmul(self, o)

    def __getitem__(self, key):
        return _ops().getitem(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return _ops().reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return _ops().transpose(self, axes or None)

    @property
    def T(self):
        return _ops().transpose(self, None)

    def sum(self, axis=None, keepdims=False):
        return _ops().sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return _ops().mean(self, axis, keepdims)


def _ops():
    from . import ops

    return ops


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def check_finite(op: str, arr: np.ndarray) -> np.ndarray:
    if arr.dtype.kind == "f" and not np.isfinite(arr).all():
        bad = int(np.size(arr) - np.count_nonzero(np.isfinite(arr)))
        raise FloatingPointError(f"{op}: produced {bad} non-finite value(s)")
    return arr


def make_result(
    op: str,
    data: np.ndarray,
    inputs: Sequence[Tensor],
    backward: Callable[[np.ndarray], tuple],
) -> Tensor:
    """Wrap ``data`` and, when any input needs grad, record the op on the tape."""
    check_finite(op, data)
    out = Tensor(data, dtype=data.dtype)
    if _state["grad_enabled"] and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        graph = current_graph()
        node = Node(op, tuple(inputs), out, backward)
        graph.record(node)
        out._node = node
        out._graph = graph
    return out


def parameter(data, name=None, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=True, dtype=dtype, name=name)
