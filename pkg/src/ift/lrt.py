"""Local reconstruction transformer built from CA-ViT style blocks.

Features travel in channels-last token layout ``[B, H, W, D]`` inside the
blocks; each block adds a window self-attention branch and a channel
attention branch computed from one shared pre-norm, then an MLP.
"""

from __future__ import annotations

import math

from .autodiff import ops
from .config import ModelConfig
from .nn import ModelParams, conv_params, linear_params

OUT_BIAS = -3.0


def init_params(rng, cfg: ModelConfig, in_channels: int) -> ModelParams:
    p = ModelParams()
    D = cfg.D
    conv_params(p, rng, "in_proj", in_channels, D, 3)
    for i in range(cfg.depth):
        b = f"blocks.{i}"
        linear_params(p, rng, f"{b}.msa.qkv", D, 3 * D)
        linear_params(p, rng, f"{b}.msa.proj", D, D, gain=0.5)
        r = max(D // cfg.ca_reduction, 1)
        linear_params(p, rng, f"{b}.ca.fc1", D, r, bias=False)
        linear_params(p, rng, f"{b}.ca.fc2", r, D, bias=False)
        linear_params(p, rng, f"{b}.mlp.fc1", D, D * cfg.lrt_mlp_ratio)
        linear_params(p, rng, f"{b}.mlp.fc2", D * cfg.lrt_mlp_ratio, D, gain=0.5)
    # near-silent head starting at a dark radiance: the decaying schedule leaves
    # little room to move a large random head or a zero bias
    conv_params(p, rng, "out_proj", D, 3, 3, gain=0.05)
    p["out_proj.b"].data[...] = OUT_BIAS
    return p


def channel_attention(x, w1, w2):
    """Scale channels of ``x[B,H,W,D]`` by ``sigmoid(w2 . relu(w1 . gap(x)))``."""
    s = ops.mean(x, axis=(1, 2), keepdims=True)
    s = ops.sigmoid(ops.matmul(ops.relu(ops.matmul(s, w1)), w2))
    return x * s


def window_partition(x, window: int):
    """``[B,H,W,D]`` -> ``[B*nW, window*window, D]`` non-overlapping windows."""
    B, H, W, D = x.shape
    if H % window or W % window:
        raise ValueError(f"feature map {H}x{W} not divisible by window {window}")
    y = ops.reshape(x, (B, H // window, window, W // window, window, D))
    y = ops.transpose(y, (0, 1, 3, 2, 4, 5))
    return ops.reshape(y, (B * (H // window) * (W // window), window * window, D))


def window_reverse(t, window: int, B: int, H: int, W: int):
    D = t.shape[-1]
    y = ops.reshape(t, (B, H // window, W // window, window, window, D))
    y = ops.transpose(y, (0, 1, 3, 2, 4, 5))
    return ops.reshape(y, (B, H, W, D))


def window_msa(x, p: ModelParams, window: int, heads: int):
    """Multi-head softmax self-attention inside each ``window x window`` block."""
    B, H, W, D = x.shape
    t = window_partition(x, window)
    nW, n, _ = t.shape
    qkv = ops.linear(t, p["qkv.w"], p["qkv.b"])
    qkv = ops.transpose(ops.reshape(qkv, (nW, n, 3, heads, D // heads)), (2, 0, 3, 1, 4))
    q, k, v = qkv[0], qkv[1], qkv[2]
    logits = ops.matmul(q, ops.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(D // heads))
    o = ops.matmul(ops.softmax(logits, axis=-1), v)
    o = ops.reshape(ops.transpose(o, (0, 2, 1, 3)), (nW, n, D))
    o = ops.linear(o, p["proj.w"], p["proj.b"])
    return window_reverse(o, window, B, H, W)


def block(x, p: ModelParams, cfg: ModelConfig, msa: bool = True, ca: bool = True):
    xn = ops.layer_norm(x)
    branches = x
    if msa:
        branches = branches + window_msa(xn, p.scope("msa"), cfg.window, cfg.lrt_heads)
    if ca:
        branches = branches + channel_attention(xn, p["ca.fc1.w"], p["ca.fc2.w"])
    x = branches
    h = ops.elu(ops.linear(ops.layer_norm(x), p["mlp.fc1.w"], p["mlp.fc1.b"]))
    return x + ops.linear(h, p["mlp.fc2.w"], p["mlp.fc2.b"])


def reconstruct(fused, p: ModelParams, cfg: ModelConfig, msa: bool = True, ca: bool = True):
    """Fused features ``[B,5C,H',W']`` -> radiance ``[B,3,2H',2W']`` in [0, 1]."""
    x = ops.conv2d(fused, p["in_proj.w"], p["in_proj.b"], stride=1, pad=1)
    x = ops.transpose(x, (0, 2, 3, 1))
    for i in range(cfg.depth):
        x = block(x, p.scope(f"blocks.{i}"), cfg, msa, ca)
    x = ops.transpose(x, (0, 3, 1, 2))
    x = ops.upsample_nearest(x, 2)
    return ops.sigmoid(ops.conv2d(x, p["out_proj.w"], p["out_proj.b"], stride=1, pad=1))
