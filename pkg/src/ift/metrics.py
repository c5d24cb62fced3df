"""PSNR / SSIM in linear and mu-law tonemapped domains."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .radiometry import DEFAULT_MU, mu_law

PSNR_CAP = 100.0


def psnr(a, b, peak: float = 1.0) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"psnr: shape mismatch {a.shape} vs {b.shape}")
    if peak <= 0:
        raise ValueError("psnr: peak must be positive")
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return PSNR_CAP
    return float(10.0 * np.log10(peak * peak / mse))


def psnr_mu(O, Ogt, mu: float = DEFAULT_MU) -> float:
    return psnr(mu_law(np.asarray(O, np.float64), mu), mu_law(np.asarray(Ogt, np.float64), mu), 1.0)


def psnr_l(O, Ogt) -> float:
    return psnr(O, Ogt, 1.0)


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _filter_valid(img, g):
    # separable valid-mode filtering; rows then columns
    rows = sliding_window_view(img, g.size, axis=1) @ g
    return sliding_window_view(rows, g.size, axis=0) @ g


def ssim(a, b, data_range: float = 1.0, size: int = 11, sigma: float = 1.5,
         k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean local SSIM; ``[C,H,W]`` inputs are averaged over channels."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"ssim: shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[None], b[None]
    if a.shape[-1] < size or a.shape[-2] < size:
        raise ValueError(f"ssim: image {a.shape[-2:]} smaller than {size}x{size} window")
    g = gaussian_window(size, sigma)
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    vals = []
    for x, y in zip(a, b):
        mx, my = _filter_valid(x, g), _filter_valid(y, g)
        sxx = _filter_valid(x * x, g) - mx * mx
        syy = _filter_valid(y * y, g) - my * my
        sxy = _filter_valid(x * y, g) - mx * my
        num = (2 * mx * my + c1) * (2 * sxy + c2)
        den = (mx * mx + my * my + c1) * (sxx + syy + c2)
        vals.append(np.mean(num / den))
    return float(np.mean(vals))


def ssim_mu(O, Ogt, mu: float = DEFAULT_MU) -> float:
    return ssim(mu_law(np.asarray(O, np.float64), mu), mu_law(np.asarray(Ogt, np.float64), mu))


@dataclass
class EvalReport:
    """Per-sample scores plus column means. HDR-VDP-2 is not computed."""

    columns: list[str]
    rows: list[dict] = field(default_factory=list)

    def add(self, name: str, **scores: float) -> None:
        self.rows.append({"sample": name, **scores})

    @property
    def means(self) -> dict:
        return {c: float(np.mean([r[c] for r in self.rows])) for c in self.columns} if self.rows else {}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["sample", *self.columns])
        for r in self.rows:
            w.writerow([r["sample"], *(repr(float(r[c])) for c in self.columns)])
        return buf.getvalue()

    def table(self) -> str:
        head = ["sample", *self.columns]
        body = [[r["sample"], *(f"{r[c]:.4f}" for c in self.columns)] for r in self.rows]
        body.append(["mean", *(f"{self.means[c]:.4f}" for c in self.columns)])
        widths = [max(len(str(x)) for x in col) for col in zip(head, *body)]
        fmt = "  ".join(f"{{:>{w}}}" for w in widths)
        lines = [fmt.format(*head), fmt.format(*("-" * w for w in widths))]
        lines += [fmt.format(*r) for r in body]
        lines.append("(HDR-VDP-2 not computed)")
        return "\n".join(lines)


def evaluate_pair(O, Ogt) -> dict:
    return {"psnr_mu": psnr_mu(O, Ogt), "psnr_l": psnr_l(O, Ogt), "ssim_mu": ssim_mu(O, Ogt)}
