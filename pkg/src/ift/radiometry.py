"""Conversions between LDR, linear radiance, and mu-law tonemapped values."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, ops

DEFAULT_GAMMA = 2.2
DEFAULT_MU = 5000.0


@dataclass(frozen=True)
class ExposureValue:
    """Exposure in stops relative to the reference frame."""

    ev: float

    @property
    def t(self) -> float:
        return 2.0 ** self.ev


def _ev(ev) -> float:
    return float(ev.ev if isinstance(ev, ExposureValue) else ev)


def gamma_correct(ldr: np.ndarray, ev, gamma: float = DEFAULT_GAMMA) -> np.ndarray:
    """Map an LDR frame into the reference linear-radiance scale.

    ``clip(ldr)^gamma / 2^ev``, clipped to [0, 1].
    """
    if gamma <= 0:
        raise ValueError(f"gamma must be positive, got {gamma}")
    ldr = np.asarray(ldr)
    dt = ldr.dtype if ldr.dtype.kind == "f" else np.float64
    lin = np.clip(ldr, 0, 1).astype(dt, copy=False) ** dt.type(gamma)
    return np.clip(lin / dt.type(2.0 ** _ev(ev)), 0, 1)


def render_exposure(hdr: np.ndarray, ev, gamma: float = DEFAULT_GAMMA, bits: int = 16) -> np.ndarray:
    """Simulate capturing linear radiance at exposure ``ev`` with a ``bits``-deep sensor."""
    if bits not in (8, 16):
        raise ValueError(f"bit depth must be 8 or 16, got {bits}")
    hdr = np.asarray(hdr, dtype=np.float64)
    levels = float(2 ** bits - 1)
    ldr = np.clip(hdr * 2.0 ** _ev(ev), 0, 1) ** (1.0 / gamma)
    return np.round(ldr * levels) / levels


def mu_law(x, mu: float = DEFAULT_MU, clip: bool = False):
    """``log(1 + mu*x) / log(1 + mu)``.

    Accepts numpy arrays or Tensors (differentiable). With ``clip`` set,
    out-of-range input is clipped with a warning instead of rejected.
    """
    if mu <= 0:
        raise ValueError(f"mu must be positive, got {mu}")
    data = x.data if isinstance(x, Tensor) else np.asarray(x)
    lo, hi = float(np.min(data)), float(np.max(data))
    if lo < 0 or hi > 1:
        if not clip:
            raise ValueError(f"mu_law input outside [0, 1]: range [{lo}, {hi}]")
        warnings.warn(f"mu_law: clipping input range [{lo}, {hi}] to [0, 1]", stacklevel=2)
        if isinstance(x, Tensor):
            raise ValueError("clip mode is only available for evaluation arrays")
        data = np.clip(data, 0, 1)
    denom = math.log1p(mu)
    if isinstance(x, Tensor):
        return ops.log(x * mu + 1.0) * (1.0 / denom)
    return np.log1p(mu * data) / denom
