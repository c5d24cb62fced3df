"""Model hyperparameters and shape validation."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

VARIANTS = ("full", "no_fgps", "no_scf", "baseline")


@dataclass(frozen=True)
class ModelConfig:
    # fast global patch search
    fe_channels: tuple[int, int, int] = (16, 32, 64)
    fgps_patch: int = 2
    fgps_dim: int = 32
    search_max: int = 256
    ste_temperature: float = 1.0
    # self-cross fusion
    C: int = 20
    d: int = 20
    heads: int = 4
    scf_patch: int = 2
    normalize: bool = True
    scf_mlp_ratio: int = 1
    # local reconstruction transformer
    D: int = 32
    lrt_heads: int = 4
    window: int = 8
    depth: int = 3
    ca_reduction: int = 4
    lrt_mlp_ratio: int = 2
    variant: str = "full"
    # "hard" = argmax forward with surrogate backward; "soft" = surrogate forward too
    ste_mode: str = "hard"

    @property
    def uses_fgps(self) -> bool:
        return self.variant in ("full", "no_scf")

    @property
    def uses_scf(self) -> bool:
        return self.variant in ("full", "no_fgps")

    @property
    def streams(self) -> tuple[str, ...]:
        return ("f1", "f1w", "f2", "f3", "f3w") if self.uses_fgps else ("f1", "f2", "f3")

    @property
    def fe_stride(self) -> int:
        return 2 ** len(self.fe_channels)

    def search_factor(self, H: int, W: int) -> int:
        """Smallest integer area-downsample factor bringing the input to at most ``search_max``."""
        f = 1
        while H // f > self.search_max or W // f > self.search_max or H % f or W % f:
            f += 1
            if f > max(H, W):
                raise ValueError(f"no integer downsample brings {H}x{W} under {self.search_max}")
        return f

    def input_multiple(self) -> int:
        """Input sizes must be multiples of this for every grid to tile exactly."""
        scf = 2 * (self.scf_patch if self.uses_scf else 1)
        lrt = 2 * self.window
        fg = self.fe_stride * self.fgps_patch if self.uses_fgps else 1
        out = 1
        for m in (scf, lrt, fg):
            out = out * m // math.gcd(out, m)
        return out

    def validate(self, H: int | None = None, W: int | None = None) -> None:
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.ste_mode not in ("hard", "soft"):
            raise ValueError(f"ste_mode must be 'hard' or 'soft', got {self.ste_mode!r}")
        if self.d % self.heads:
            raise ValueError(f"d={self.d} not divisible by heads={self.heads}")
        if (self.C * self.scf_patch ** 2) % self.heads:
            raise ValueError("SCF token width C*patch^2 must be divisible by heads")
        if self.D % self.lrt_heads:
            raise ValueError(f"D={self.D} not divisible by lrt_heads={self.lrt_heads}")
        if self.ste_temperature <= 0:
            raise ValueError("ste_temperature must be positive")
        for name in ("fgps_patch", "scf_patch", "window", "depth", "C", "d", "D", "heads", "lrt_heads"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if H is None:
            return
        W = H if W is None else W
        m = self.input_multiple()
        if H % m or W % m:
            raise ValueError(f"input {H}x{W} must be divisible by {m} for this configuration")
        if self.uses_fgps:
            f = self.search_factor(H, W)
            step = f * self.fe_stride * self.fgps_patch
            if H % step or W % step:
                raise ValueError(f"input {H}x{W} does not tile into FGPS tokens of {step} px")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        if "fe_channels" in d:
            d["fe_channels"] = tuple(d["fe_channels"])
        return cls(**d)

