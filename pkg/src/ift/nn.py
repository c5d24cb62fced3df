"""Parameter containers and initializers shared by the model blocks."""

from __future__ import annotations

from collections import OrderedDict

import numpy as np

from .autodiff import Tensor, get_default_dtype, parameter


class ModelParams(OrderedDict):
    """Ordered ``name -> Tensor`` map of learnable weights."""

    def scope(self, prefix: str) -> "ModelParams":
        p = prefix + "."
        return ModelParams((k[len(p):], v) for k, v in self.items() if k.startswith(p))

    def arrays(self) -> dict:
        return {k: v.data for k, v in self.items()}

    def zero_grad(self) -> None:
        for v in self.values():
            v.grad = None

    def astype(self, dtype) -> "ModelParams":
        return ModelParams((k, parameter(v.data.astype(dtype), name=k)) for k, v in self.items())

    def count(self) -> int:
        return int(sum(v.size for v in self.values()))


def normal(rng, shape, fan_in, gain=1.0, name=None) -> Tensor:
    w = rng.standard_normal(shape) * (gain / np.sqrt(fan_in))
    return parameter(w.astype(get_default_dtype()), name=name)


def zeros(shape, name=None) -> Tensor:
    return parameter(np.zeros(shape, dtype=get_default_dtype()), name=name)


def conv_params(p: ModelParams, rng, name, cin, cout, k, gain=1.0, bias=True) -> None:
    p[f"{name}.w"] = normal(rng, (cout, cin, k, k), cin * k * k, gain, f"{name}.w")
    if bias:
        p[f"{name}.b"] = zeros((cout,), f"{name}.b")


def linear_params(p: ModelParams, rng, name, din, dout, gain=1.0, bias=True) -> None:
    p[f"{name}.w"] = normal(rng, (din, dout), din, gain, f"{name}.w")
    if bias:
        p[f"{name}.b"] = zeros((dout,), f"{name}.b")
