"""Synthetic dynamic HDR scenes with exact ground truth.

A scene is a piecewise-smooth radiance background plus a few solid moving
shapes. The middle frame is the reference pose; the short and long
exposures see the shapes translated by independent integer offsets.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .autodiff import tenfile
from .radiometry import DEFAULT_GAMMA, ExposureValue, gamma_correct, render_exposure


@dataclass(frozen=True)
class SceneSpec:
    size: tuple[int, int] = (64, 64)
    n_objects: int = 2
    motion_px: int = 12
    dynamic_range: float = 1000.0
    seed: int = 0
    evs: tuple[float, float, float] = (-2.0, 0.0, 2.0)
    gamma: float = DEFAULT_GAMMA
    bits: int = 16
    object_radius: tuple[int, int] = (6, 12)

    def validate(self, multiple: int = 1) -> None:
        H, W = self.size
        if H <= 0 or W <= 0:
            raise ValueError(f"scene size must be positive, got {self.size}")
        if H % multiple or W % multiple:
            raise ValueError(f"scene size {self.size} must be divisible by {multiple}")
        if self.motion_px < 0:
            raise ValueError("motion_px must be non-negative")
        if self.n_objects < 0:
            raise ValueError("n_objects must be non-negative")
        if len(self.evs) != 3 or self.evs[1] != 0:
            raise ValueError(f"evs must be three values with the reference at 0, got {self.evs}")
        if self.dynamic_range < 1:
            raise ValueError("dynamic_range must be >= 1")
        if 2 * self.object_radius[1] + 1 > min(H, W):
            raise ValueError(f"objects of radius {self.object_radius[1]} do not fit in {self.size}")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "SceneSpec":
        d = dict(d)
        for key in ("size", "evs", "object_radius"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class LdrStack:
    """Three bracketed LDR frames ``I`` with their gamma-corrected companions ``G``."""

    I: tuple[np.ndarray, np.ndarray, np.ndarray]
    G: tuple[np.ndarray, np.ndarray, np.ndarray]
    evs: tuple[ExposureValue, ExposureValue, ExposureValue]
    gamma: float = DEFAULT_GAMMA

    @classmethod
    def from_ldr(cls, frames, evs, gamma: float = DEFAULT_GAMMA) -> "LdrStack":
        evs = tuple(e if isinstance(e, ExposureValue) else ExposureValue(float(e)) for e in evs)
        frames = tuple(np.ascontiguousarray(f, dtype=np.float32) for f in frames)
        if len(frames) != 3 or len({f.shape for f in frames}) != 1:
            raise ValueError("an LDR stack needs three frames of identical shape")
        G = tuple(gamma_correct(f, e, gamma) for f, e in zip(frames, evs))
        return cls(frames, G, evs, gamma)

    @property
    def shape(self):
        return self.I[0].shape


@dataclass
class SceneSample:
    stack: LdrStack
    gt: np.ndarray
    meta: dict = field(default_factory=dict)


def _smooth_field(rng, H, W, n_waves=4):
    yy, xx = np.meshgrid(np.arange(H) / H, np.arange(W) / W, indexing="ij")
    f = np.zeros((H, W))
    for _ in range(n_waves):
        fy, fx = rng.uniform(-2.5, 2.5, 2)
        f += rng.uniform(0.3, 1.0) * np.cos(2 * np.pi * (fy * yy + fx * xx) + rng.uniform(0, 2 * np.pi))
    # one step edge makes the background piecewise rather than globally smooth
    ny, nx = rng.normal(size=2)
    f += rng.choice([-1, 1]) * 1.5 * ((ny * (yy - rng.uniform(0.2, 0.8)) + nx * (xx - rng.uniform(0.2, 0.8))) > 0)
    f += 0.15 * rng.standard_normal((H, W))
    f -= f.min()
    return f / f.max()


def _shape_mask(kind, cy, cx, r, H, W):
    yy, xx = np.mgrid[0:H, 0:W]
    if kind == 0:
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    return (np.abs(yy - cy) <= r) & (np.abs(xx - cx) <= r)


def _background(rng, spec: SceneSpec) -> np.ndarray:
    H, W = spec.size
    level = _smooth_field(rng, H, W)
    radiance = spec.dynamic_range ** (level - 1.0)
    tint = rng.uniform(0.6, 1.0, 3)
    return radiance[None] * tint[:, None, None]


def generate(spec: SceneSpec) -> SceneSample:
    """Render a dynamic scene; deterministic given ``spec.seed``."""
    spec.validate()
    H, W = spec.size
    rng = np.random.default_rng(spec.seed)
    bg = _background(rng, spec)
    frames = [bg.copy(), bg.copy(), bg.copy()]
    objects = []
    for _ in range(spec.n_objects):
        r = int(rng.integers(spec.object_radius[0], spec.object_radius[1] + 1))
        cy, cx = (int(rng.integers(r, n - r)) for n in (H, W))
        kind = int(rng.integers(0, 2))
        color = spec.dynamic_range ** rng.uniform(-0.5, 0.0) * rng.uniform(0.5, 1.0, 3)
        m = spec.motion_px
        offsets = [tuple(int(v) for v in rng.integers(-m, m + 1, 2)) for _ in range(2)]
        offsets = [offsets[0], (0, 0), offsets[1]]
        for k, (dy, dx) in enumerate(offsets):
            mask = _shape_mask(kind, cy + dy, cx + dx, r, H, W)
            frames[k][:, mask] = color[:, None]
        objects.append({"kind": kind, "center": [cy, cx], "radius": r, "offsets": offsets})
    frames = [np.clip(f, 0, 1) for f in frames]
    ldr = [render_exposure(f, ev, spec.gamma, spec.bits) for f, ev in zip(frames, spec.evs)]
    stack = LdrStack.from_ldr(ldr, spec.evs, spec.gamma)
    return SceneSample(stack, frames[1].astype(np.float32), {"spec": spec.to_json(), "objects": objects})


def naive_merge(stack: LdrStack) -> np.ndarray:
    """Triangle-weighted average of the gamma-corrected frames (ghost-prone baseline)."""
    w = [np.clip(1.0 - np.abs(2.0 * f.astype(np.float64) - 1.0), 0, None) for f in stack.I]
    total = w[0] + w[1] + w[2]
    ref = stack.G[1].astype(np.float64)
    # written as a correction to the reference so identical frames merge exactly
    delta = sum(wi * (g.astype(np.float64) - ref) for wi, g in zip(w, stack.G))
    merged = ref + np.divide(delta, total, out=np.zeros_like(ref), where=total > 0)
    return np.clip(merged, 0, 1).astype(np.float32)


# ----------------------------------------------------------- persistence

_FRAME_FILES = ("I1", "I2", "I3")


def save_sample(sample: SceneSample, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, arr in zip(_FRAME_FILES, sample.stack.I):
        tenfile.save(out / f"{name}.ten", arr)
    for k, arr in enumerate(sample.stack.G, 1):
        tenfile.save(out / f"G{k}.ten", arr)
    tenfile.save(out / "gt.ten", sample.gt)
    meta = dict(sample.meta, evs=[e.ev for e in sample.stack.evs], gamma=sample.stack.gamma)
    (out / "sample.json").write_text(json.dumps(meta, indent=2, sort_keys=True))


def load_sample(path) -> SceneSample:
    path = Path(path)
    meta = json.loads((path / "sample.json").read_text())
    frames = [tenfile.load(path / f"{n}.ten") for n in _FRAME_FILES]
    G = tuple(tenfile.load(path / f"G{k}.ten") for k in (1, 2, 3))
    evs = tuple(ExposureValue(float(e)) for e in meta["evs"])
    stack = LdrStack(tuple(frames), G, evs, float(meta.get("gamma", DEFAULT_GAMMA)))
    return SceneSample(stack, tenfile.load(path / "gt.ten"), meta)


def dataset_specs(base: SceneSpec, n_train: int = 16, n_val: int = 8):
    """Seed-partitioned train/val specs: seeds ``base.seed + i``."""
    specs = [replace(base, seed=base.seed + i) for i in range(n_train + n_val)]
    return specs[:n_train], specs[n_train:]


def write_dataset(out_dir, base: SceneSpec, n_train: int = 16, n_val: int = 8) -> dict:
    out = Path(out_dir)
    train, val = dataset_specs(base, n_train, n_val)
    entries = []
    for split, specs in (("train", train), ("val", val)):
        for spec in specs:
            name = f"{split}_{spec.seed:06d}"
            save_sample(generate(spec), out / name)
            entries.append({"name": name, "split": split, "seed": spec.seed})
    manifest = {"format": "ift-synthetic-1", "spec": base.to_json(), "evs": list(base.evs), "samples": entries}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


def load_dataset(path, split: str | None = None) -> list[SceneSample]:
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    return [load_sample(path / e["name"]) for e in manifest["samples"] if split is None or e["split"] == split]


def load_kalantari(path):
    """Placeholder for real bracketed captures.

    Expected layout, one directory per scene::

        <scene>/exposures.txt      three EVs, one per line
        <scene>/<name>_1.tif ...   three 16-bit LDR frames, short to long
        <scene>/HDRImg.hdr         ground-truth radiance aligned to frame 2

    Reading these requires TIFF/Radiance-HDR codecs this package does not ship.
    """
    raise NotImplementedError("real dataset ingestion is not supported; use generate()")
