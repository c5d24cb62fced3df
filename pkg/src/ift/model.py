"""Full fusion network: patch search, self-cross fusion and reconstruction.

The ``variant`` field of :class:`ModelConfig` selects one of the ablation
rows: ``full``, ``no_fgps`` (baseline + SCF), ``no_scf`` (baseline + FGPS)
and ``baseline``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import fgps, lrt, scf
from .autodiff import Tensor, no_grad, ops, parameter, tenfile
from .config import ModelConfig
from .nn import ModelParams


def init_params(cfg: ModelConfig, seed: int = 0) -> ModelParams:
    cfg.validate()
    rng = np.random.default_rng(seed)
    p = ModelParams()
    if cfg.uses_fgps:
        for k, v in fgps.init_params(rng, cfg).items():
            p[f"fgps.{k}"] = v
    for k, v in scf.init_params(rng, cfg).items():
        p[f"scf.{k}"] = v
    for k, v in lrt.init_params(rng, cfg, cfg.C * len(cfg.streams)).items():
        p[f"lrt.{k}"] = v
    for k, v in p.items():
        v.name = k
    return p


@dataclass
class ForwardResult:
    output: Tensor
    P_L: np.ndarray | None = None
    P_H: np.ndarray | None = None
    M_L: Tensor | None = None
    M_H: Tensor | None = None


def stack_inputs(stacks, dtype=None):
    """Batch LDR stacks into ``(I, G)``: two lists of three ``[B,3,H,W]`` Tensors."""
    I = [Tensor(np.stack([s.I[k] for s in stacks]), dtype=dtype) for k in range(3)]
    G = [Tensor(np.stack([s.G[k] for s in stacks]), dtype=dtype) for k in range(3)]
    return I, G


def forward(I, G, p: ModelParams, cfg: ModelConfig) -> ForwardResult:
    H, W = I[0].shape[-2:]
    cfg.validate(H, W)
    sp = p.scope("scf")
    f1, f2, f3 = scf.shallow_features(I, G, sp, cfg)
    streams = {"f1": f1, "f2": f2, "f3": f3}
    res = ForwardResult(None)
    if cfg.uses_fgps:
        res.P_L, res.P_H, res.M_L, res.M_H = fgps.run_fgps(G, p.scope("fgps"), cfg)
        grid = fgps.token_grid(H, W, cfg)
        streams["f1w"] = scf.warp_by_search(f1, res.M_L, grid, cfg)
        streams["f3w"] = scf.warp_by_search(f3, res.M_H, grid, cfg)
    if cfg.uses_scf:
        fused = scf.saat(streams, sp, cfg).concat
    else:
        fused = ops.concat([streams[s] for s in cfg.streams], axis=1)
    res.output = lrt.reconstruct(fused, p.scope("lrt"), cfg)
    return res


def fuse(stack, p: ModelParams, cfg: ModelConfig) -> np.ndarray:
    """Fuse one LDR stack into a ``[3,H,W]`` radiance array without recording a tape."""
    dtype = next(iter(p.values())).dtype
    with no_grad():
        I, G = stack_inputs([stack], dtype=dtype)
        return forward(I, G, p, cfg).output.data[0]


def save_checkpoint(path, p: ModelParams, cfg: ModelConfig, **manifest) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    for k, v in p.items():
        tenfile.save(path / f"{k}.ten", v.data)
    doc = {"model": cfg.to_json(), "params": list(p.keys()), **manifest}
    (path / "manifest.json").write_text(json.dumps(doc, indent=2, sort_keys=True))


def load_checkpoint(path):
    """Return ``(params, model_cfg, manifest)`` from a checkpoint directory."""
    path = Path(path)
    mpath = path / "manifest.json"
    if not mpath.is_file():
        raise FileNotFoundError(f"no checkpoint manifest at {mpath}")
    doc = json.loads(mpath.read_text())
    cfg = ModelConfig.from_json(doc["model"])
    p = ModelParams((k, parameter(tenfile.load(path / f"{k}.ten"), name=k)) for k in doc["params"])
    return p, cfg, doc
