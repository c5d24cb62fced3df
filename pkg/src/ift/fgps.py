"""Fast global patch search.

Each reference-frame token is matched to its most cosine-similar token in
each supporting frame. Matching runs on a downsampled feature grid; the
hard argmax selection is trained through a straight-through estimator whose
backward pass is that of a row softmax over the similarity map.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor, ops
from .autodiff.tensor import make_result
from .config import ModelConfig
from .nn import ModelParams, conv_params, normal

COS_EPS = 1e-12


def init_params(rng, cfg: ModelConfig) -> ModelParams:
    p = ModelParams()
    cin = 3
    for i, cout in enumerate(cfg.fe_channels):
        conv_params(p, rng, f"fe.{i}", cin, cout, 3)
        cin = cout
    tok = cin * cfg.fgps_patch ** 2
    # the three embeddings start identical so untrained matching is self-consistent
    phi = normal(rng, (tok, cfg.fgps_dim), tok)
    for name in ("phi", "varphi", "zeta"):
        p[f"{name}.w"] = Tensor(phi.data.copy(), requires_grad=True, name=f"{name}.w")
    return p


def extract_features(G, p: ModelParams, cfg: ModelConfig):
    """Shared extractor on each gamma-corrected frame ``G[i]: [B,3,H,W]``."""
    H, W = G[0].shape[-2:]
    factor = cfg.search_factor(H, W)
    if (H // factor) % cfg.fe_stride or (W // factor) % cfg.fe_stride:
        raise ValueError(f"search resolution {H // factor}x{W // factor} not divisible by stride {cfg.fe_stride}")
    feats = []
    for g in G:
        x = ops.avg_pool2d(g, factor)
        for i in range(len(cfg.fe_channels)):
            x = ops.elu(ops.conv2d(x, p[f"fe.{i}.w"], p[f"fe.{i}.b"], stride=2, pad=1))
        feats.append(x)
    return feats


def embed_tokens(f, w, patch: int):
    """Flatten non-overlapping patches of ``f[B,C,h,w]`` and project: ``[B,n,d]``."""
    h, wd = f.shape[-2:]
    if h % patch or wd % patch:
        raise ValueError(f"feature map {h}x{wd} not divisible by patch {patch}")
    return ops.matmul(ops.patchify(f, patch), w)


def similarity(Q, K):
    """Cosine similarity between every query row and every key row: ``[..., n, m]``."""
    nq = ops.sqrt(ops.sum(Q * Q, axis=-1, keepdims=True) + 1e-24)
    nk = ops.sqrt(ops.sum(K * K, axis=-1, keepdims=True) + 1e-24)
    dots = ops.matmul(Q, ops.swapaxes(K, -1, -2))
    return dots / (ops.matmul(nq, ops.swapaxes(nk, -1, -2)) + COS_EPS)


TIE_ULPS = 8


def position_map(M) -> np.ndarray:
    """Best supporting-token index for each reference token (lowest index on ties).

    Cosines within a few ulps of the row maximum count as tied: BLAS may round
    identical token pairs differently depending on where they sit in the
    matrix, and a tie must not be decided by that.
    """
    data = M.data if isinstance(M, Tensor) else np.asarray(M)
    tol = TIE_ULPS * np.finfo(data.dtype).eps
    best = data.max(axis=-1, keepdims=True)
    return np.argmax(data >= best - tol, axis=-1)


def ste_gather(f, M, temperature: float = 1.0):
    """Hard row gather by ``argmax(M)`` with the softmax surrogate's backward.

    Forward: ``out[i] = f[argmax_j M[i, j]]``. Backward: as if the forward
    were ``softmax(M / temperature) @ f``.
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    f = f if isinstance(f, Tensor) else Tensor(f)
    M = M if isinstance(M, Tensor) else Tensor(M)
    idx = position_map(M)
    out = np.take_along_axis(f.data, idx[..., None], axis=-2)

    def bw(g):
        z = M.data / temperature
        z = z - z.max(axis=-1, keepdims=True)
        S = np.exp(z)
        S /= S.sum(axis=-1, keepdims=True)
        gf = gM = None
        if f.requires_grad:
            gf = ops.unbroadcast(np.matmul(np.swapaxes(S, -1, -2), g), f.shape)
        if M.requires_grad:
            gS = np.matmul(g, np.swapaxes(f.data, -1, -2))
            gM = S * (gS - np.sum(gS * S, axis=-1, keepdims=True)) / temperature
            gM = ops.unbroadcast(gM, M.shape)
        return gf, gM

    return make_result("ste_gather", out, (f, M), bw)


def soft_gather(f, M, temperature: float = 1.0):
    """The surrogate itself: ``softmax(M / temperature) @ f``."""
    return ops.matmul(ops.softmax(M * (1.0 / temperature), axis=-1), f)


def run_fgps(G, p: ModelParams, cfg: ModelConfig):
    """Match reference tokens against both supporting frames.

    Returns ``(P_L, P_H, M_L, M_H)``; the similarity maps stay on the tape
    for the straight-through backward.
    """
    f1, f2, f3 = extract_features(G, p, cfg)
    Q = embed_tokens(f2, p["phi.w"], cfg.fgps_patch)
    K_L = embed_tokens(f1, p["varphi.w"], cfg.fgps_patch)
    K_H = embed_tokens(f3, p["zeta.w"], cfg.fgps_patch)
    M_L, M_H = similarity(Q, K_L), similarity(Q, K_H)
    return position_map(M_L), position_map(M_H), M_L, M_H


def token_grid(H: int, W: int, cfg: ModelConfig) -> tuple[int, int]:
    """FGPS token grid (rows, cols) for an ``H x W`` input."""
    step = cfg.search_factor(H, W) * cfg.fe_stride * cfg.fgps_patch
    return H // step, W // step


def rescale_position_map(P, grid: tuple[int, int], r: int) -> np.ndarray:
    """Expand a map on a ``grid`` of tokens to the grid ``r`` times finer.

    Each coarse token becomes an ``r x r`` block; block offsets are kept, so
    fine token ``(y, x)`` reads fine token ``(sy*r + y%r, sx*r + x%r)`` where
    ``(sy, sx)`` is the coarse source of ``(y//r, x//r)``.
    """
    P = np.asarray(P, dtype=np.int64)
    gh, gw = grid
    if P.shape[-1] != gh * gw:
        raise ValueError(f"position map of length {P.shape[-1]} does not match grid {grid}")
    yy, xx = np.mgrid[0:gh * r, 0:gw * r]
    coarse = (yy // r) * gw + (xx // r)
    src = P[..., coarse.ravel()]
    sy, sx = src // gw, src % gw
    fy = sy * r + (yy.ravel() % r)
    fx = sx * r + (xx.ravel() % r)
    return fy * (gw * r) + fx
