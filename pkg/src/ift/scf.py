"""Self-cross fusion: patch warping plus reference-queried linear attention."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import ops
from .config import ModelConfig
from .fgps import rescale_position_map, soft_gather, ste_gather
from .nn import ModelParams, conv_params, linear_params, normal

LINEAR_EPS = 1e-12


def init_params(rng, cfg: ModelConfig) -> ModelParams:
    p = ModelParams()
    for k in (1, 2, 3):
        conv_params(p, rng, f"conv{k}", 6, cfg.C, 3)
    if not cfg.uses_scf:
        return p
    tok = cfg.C * cfg.scf_patch ** 2
    p["theta0.w"] = normal(rng, (tok, cfg.d), tok, name="theta0.w")
    for s in cfg.streams:
        p[f"theta.{s}.w"] = normal(rng, (tok, cfg.d), tok, name=f"theta.{s}.w")
        # small value init keeps each stream close to identity through the residual
        p[f"vtheta.{s}.w"] = normal(rng, (tok, tok), tok, gain=0.5, name=f"vtheta.{s}.w")
        hidden = tok * cfg.scf_mlp_ratio
        linear_params(p, rng, f"mlp.{s}.fc1", tok, hidden)
        linear_params(p, rng, f"mlp.{s}.fc2", hidden, tok, gain=0.5)
    return p


@dataclass
class FusedFeatures:
    streams: dict
    concat: object


def shallow_features(I, G, p: ModelParams, cfg: ModelConfig):
    """``f_k = conv_k([I_k, G_k])``; one unshared stride-2 conv per frame."""
    return [
        ops.conv2d(ops.concat([i, g], axis=1), p[f"conv{k}.w"], p[f"conv{k}.b"], stride=2, pad=1)
        for k, (i, g) in enumerate(zip(I, G), 1)
    ]


def warp(f, P, patch: int):
    """Rearrange ``patch``-sized blocks of ``f``: output block i is input block ``P[i]``."""
    return ops.gather_patches(f, P, patch)


def warp_by_search(f, M, grid, cfg: ModelConfig):
    """Warp ``f[B,C,H',W']`` with the coarse similarity map ``M`` through the STE.

    A coarse token covers a ``H'/grid`` block of ``f``; gathering whole blocks
    is the same as warping with the rescaled fine-grid position map.
    """
    B, C, H, W = f.shape
    block = H // grid[0]
    tokens = ops.patchify(f, block)
    if cfg.ste_mode == "soft":
        moved = soft_gather(tokens, M, cfg.ste_temperature)
    else:
        moved = ste_gather(tokens, M, cfg.ste_temperature)
    return ops.unpatchify(moved, C, H, W, block)


def fine_position_map(P, grid, f_shape, patch: int) -> np.ndarray:
    """Express a coarse position map on the ``patch`` grid of a feature map."""
    H = f_shape[-2]
    r = (H // grid[0]) // patch
    return rescale_position_map(P, grid, r)


def elu1(x):
    return ops.elu(x) + 1.0


def attention_quadratic(Q, K, V):
    """``softmax(Q K^T / sqrt(d)) V``."""
    d = Q.shape[-1]
    logits = ops.matmul(Q, ops.swapaxes(K, -1, -2)) * (1.0 / math.sqrt(d))
    return ops.matmul(ops.softmax(logits, axis=-1), V)


def attention_linear(Q, K, V, normalize: bool = True):
    """Kernelized attention with feature map ``elu(x) + 1``, evaluated right to left.

    Never forms the ``n x m`` weight matrix: cost is ``O((n + m) d dv)``.
    """
    q, k = elu1(Q), elu1(K)
    kv = ops.matmul(ops.swapaxes(k, -1, -2), V)
    out = ops.matmul(q, kv)
    if normalize:
        z = ops.matmul(q, ops.swapaxes(ops.sum(k, axis=-2, keepdims=True), -1, -2))
        out = out / (z + LINEAR_EPS)
    return out


def _split_heads(x, heads):
    B, n, dim = x.shape
    return ops.transpose(ops.reshape(x, (B, n, heads, dim // heads)), (0, 2, 1, 3))


def _merge_heads(x):
    B, h, n, dh = x.shape
    return ops.reshape(ops.transpose(x, (0, 2, 1, 3)), (B, n, h * dh))


def saat(streams: dict, p: ModelParams, cfg: ModelConfig) -> FusedFeatures:
    """Fuse every stream with queries taken from the reference stream ``f2``."""
    shapes = {s: f.shape for s, f in streams.items()}
    if len(set(shapes.values())) != 1:
        raise ValueError(f"SAAT streams must share one shape, got {shapes}")
    B, C, H, W = streams["f2"].shape
    patch, heads = cfg.scf_patch, cfg.heads
    tokens = {s: ops.patchify(f, patch) for s, f in streams.items()}
    normed = {s: ops.layer_norm(t) for s, t in tokens.items()}
    Q = _split_heads(ops.matmul(normed["f2"], p["theta0.w"]), heads)
    out = {}
    for s in cfg.streams:
        K = _split_heads(ops.matmul(normed[s], p[f"theta.{s}.w"]), heads)
        V = _split_heads(ops.matmul(normed[s], p[f"vtheta.{s}.w"]), heads)
        t = tokens[s] + _merge_heads(attention_linear(Q, K, V, cfg.normalize))
        h = ops.elu(ops.linear(ops.layer_norm(t), p[f"mlp.{s}.fc1.w"], p[f"mlp.{s}.fc1.b"]))
        t = t + ops.linear(h, p[f"mlp.{s}.fc2.w"], p[f"mlp.{s}.fc2.b"])
        out[s] = ops.unpatchify(t, C, H, W, patch)
    return FusedFeatures(out, ops.concat([out[s] for s in cfg.streams], axis=1))
