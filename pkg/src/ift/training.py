"""Losses, Adam, learning-rate schedule, augmentation and the training loop."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import fgps, model, scf
from .autodiff import Graph, Tensor, ops, parameter
from .config import ModelConfig
from .metrics import psnr_mu
from .nn import ModelParams, conv_params
from .radiometry import mu_law
from .scene import LdrStack, SceneSample


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 2e-4
    lr_end: float = 1e-6
    decay_power: float = 0.3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lambda_p: float = 0.01
    steps: int = 2000
    crop: int = 64
    seed: int = 0
    val_every: int = 100
    perceptual_seed: int = 1234

    def validate(self, multiple: int = 1) -> None:
        if not (self.lr0 > self.lr_end > 0):
            raise ValueError("need lr0 > lr_end > 0")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.crop % multiple:
            raise ValueError(f"crop {self.crop} must be divisible by {multiple}")
        if self.lambda_p < 0:
            raise ValueError("lambda_p must be non-negative")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "TrainConfig":
        return cls(**d)


# ---------------------------------------------------------------- losses

def loss_l1_mu(O, Ogt):
    return ops.mean(ops.abs(mu_law(O) - mu_law(Ogt)))


class PerceptualExtractor:
    """Frozen random strided conv stack standing in for a pretrained network."""

    def __init__(self, seed: int = 1234, channels=(8, 16, 32), dtype=None):
        rng = np.random.default_rng(seed)
        p = ModelParams()
        cin = 3
        for i, c in enumerate(channels):
            conv_params(p, rng, f"layer{i}", cin, c, 3)
            cin = c
        # biases start at zero; a little random offset keeps every unit active
        for k in p:
            if k.endswith(".b"):
                p[k].data[...] = 0.1 * rng.standard_normal(p[k].shape)
        for v in p.values():
            v.requires_grad = False
        self.params = p if dtype is None else ModelParams((k, Tensor(v.data.astype(dtype))) for k, v in p.items())
        self.layers = tuple(range(len(channels)))

    def features(self, x):
        out = []
        for i in self.layers:
            x = ops.elu(ops.conv2d(x, self.params[f"layer{i}.w"], self.params[f"layer{i}.b"], stride=2, pad=1))
            out.append(x)
        return out


def loss_perceptual(O, Ogt, ext: PerceptualExtractor):
    fa = ext.features(mu_law(O))
    fb = ext.features(mu_law(Ogt))
    total = None
    for a, b in zip(fa, fb):
        term = ops.mean(ops.abs(a - b))
        total = term if total is None else total + term
    return total


def loss_total(O, Ogt, cfg: TrainConfig, ext: PerceptualExtractor | None):
    l1 = loss_l1_mu(O, Ogt)
    if cfg.lambda_p == 0 or ext is None:
        return l1
    return l1 + cfg.lambda_p * loss_perceptual(O, Ogt, ext)


# ---------------------------------------------------------------- optimizer

class AdamState:
    def __init__(self, params: ModelParams):
        self.m = {k: np.zeros_like(v.data) for k, v in params.items()}
        self.v = {k: np.zeros_like(v.data) for k, v in params.items()}
        self.t = 0


def adam_step(params: ModelParams, state: AdamState, lr: float, cfg: TrainConfig) -> None:
    """Bias-corrected Adam update of every parameter in place."""
    missing = [k for k, v in params.items() if v.grad is None]
    if missing:
        raise ValueError(f"missing gradient for {missing[:5]}{'...' if len(missing) > 5 else ''}")
    state.t += 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for k, p in params.items():
        g = p.grad
        m, v = state.m[k], state.v[k]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        step = lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)
        p.data -= step.astype(p.data.dtype, copy=False)


def lr_schedule(t: int, T: int, cfg: TrainConfig) -> float:
    if T <= 0:
        raise ValueError("schedule length T must be positive")
    if not 0 <= t <= T:
        raise ValueError(f"step {t} outside [0, {T}]")
    return cfg.lr0 * (cfg.lr_end / cfg.lr0) ** ((t / T) ** cfg.decay_power)


# ---------------------------------------------------------------- augmentation

def _geom(x, top, left, crop, flip, rot):
    x = x[..., top:top + crop, left:left + crop]
    if flip:
        x = x[..., ::-1]
    return np.ascontiguousarray(np.rot90(x, rot, axes=(-2, -1)))


def augment(sample: SceneSample, rng, crop: int | None = None) -> SceneSample:
    """Apply one random crop, horizontal flip and 90-degree rotation to every frame and the target."""
    H, W = sample.gt.shape[-2:]
    crop = min(H, W) if crop is None else crop
    if crop > H or crop > W:
        raise ValueError(f"crop {crop} larger than image {H}x{W}")
    top = int(rng.integers(0, H - crop + 1))
    left = int(rng.integers(0, W - crop + 1))
    flip = bool(rng.integers(0, 2))
    rot = int(rng.integers(0, 4))
    return transform(sample, top, left, crop, flip, rot)


def transform(sample: SceneSample, top: int, left: int, crop: int, flip: bool, rot: int) -> SceneSample:
    s = sample.stack
    stack = LdrStack(
        tuple(_geom(x, top, left, crop, flip, rot) for x in s.I),
        tuple(_geom(x, top, left, crop, flip, rot) for x in s.G),
        s.evs,
        s.gamma,
    )
    return SceneSample(stack, _geom(sample.gt, top, left, crop, flip, rot), dict(sample.meta))


# ---------------------------------------------------------------- loop

@dataclass
class TrainResult:
    params: ModelParams
    log: list
    val_psnr_mu: float


def evaluate(params: ModelParams, mcfg: ModelConfig, samples) -> float:
    """Mean PSNR-mu of the model over ``samples``."""
    return float(np.mean([psnr_mu(model.fuse(s.stack, params, mcfg), s.gt) for s in samples]))


def log_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "lr", "train_loss", "val_psnr_mu"])
    for r in rows:
        val = "" if r["val_psnr_mu"] is None else repr(r["val_psnr_mu"])
        w.writerow([r["step"], repr(r["lr"]), repr(r["train_loss"]), val])
    return buf.getvalue()


def train(train_set, val_set, cfg: TrainConfig, mcfg: ModelConfig, out_dir=None, progress=None) -> TrainResult:
    """Run ``cfg.steps`` Adam steps on batch-1 augmented crops.

    Returns the trained parameters, one log row per step and the final
    validation PSNR-mu. With ``out_dir`` the checkpoint and ``log.csv`` are
    written there.
    """
    if not train_set:
        raise ValueError("training set is empty")
    cfg.validate(mcfg.input_multiple())
    mcfg.validate(cfg.crop, cfg.crop)
    params = model.init_params(mcfg, cfg.seed)
    ext = PerceptualExtractor(cfg.perceptual_seed)
    state = AdamState(params)
    rng = np.random.default_rng(cfg.seed)
    T = max(cfg.steps - 1, 1)
    rows = []
    val = None
    for step in range(cfg.steps):
        sample = train_set[int(rng.integers(len(train_set)))]
        sample = augment(sample, rng, cfg.crop)
        I, G = model.stack_inputs([sample.stack])
        gt = Tensor(sample.gt[None])
        params.zero_grad()
        try:
            with Graph() as g:
                out = model.forward(I, G, params, mcfg).output
                loss = loss_total(out, gt, cfg, ext)
                g.backward(loss)
        except FloatingPointError as e:
            raise FloatingPointError(f"non-finite value at step {step} (seed {cfg.seed}): {e}") from e
        lr = lr_schedule(min(step, T), T, cfg)
        adam_step(params, state, lr, cfg)
        val = None
        if val_set and ((step + 1) % cfg.val_every == 0 or step == cfg.steps - 1):
            val = evaluate(params, mcfg, val_set)
        rows.append({"step": step, "lr": lr, "train_loss": float(loss.data), "val_psnr_mu": val})
        if progress is not None:
            progress(rows[-1])
    final_val = rows[-1]["val_psnr_mu"]
    if out_dir is not None:
        out_dir = Path(out_dir)
        model.save_checkpoint(
            out_dir,
            params,
            mcfg,
            train=cfg.to_json(),
            step=cfg.steps,
            loss_history=[r["train_loss"] for r in rows],
            val_psnr_mu=final_val,
        )
        (out_dir / "log.csv").write_text(log_csv(rows))
    return TrainResult(params, rows, final_val if final_val is not None else math.nan)


# ---------------------------------------------------------------- search-only training

def permutation_scene(rng, size: int = 64, grid: int = 4, margin: int = 7):
    """A reference image plus a supporting image whose ``grid x grid`` blocks are permuted.

    Returns ``(ref, support, perm)`` with ``support`` block ``perm[i]`` equal to
    ``ref`` block ``i``; the correct position map is therefore ``perm``. The
    last ``margin`` rows and columns of every block are zero: the search
    extractor's receptive field reaches that far into the preceding block, so
    the band makes every token see the same surroundings as the zero padding.
    """
    block = size // grid
    n = grid * grid
    ref = np.zeros((3, size, size), np.float32)
    inner = block - margin
    for i in range(n):
        y, x = divmod(i, grid)
        tile = rng.uniform(0.0, 1.0, (3, inner, inner)) + rng.uniform(0.0, 1.0, (3, 1, 1))
        ref[:, y * block:y * block + inner, x * block:x * block + inner] = tile / 2
    perm = rng.permutation(n)
    tok = ops.patchify(Tensor(ref[None]), block).data[0]
    sup_tok = np.empty_like(tok)
    sup_tok[perm] = tok
    support = ops.unpatchify(Tensor(sup_tok[None]), 3, size, size, block).data[0]
    return ref, support, perm


def match_rate(P, perm) -> float:
    return float(np.mean(np.asarray(P) == np.asarray(perm)))


def train_search(steps: int = 100, seed: int = 0, lr: float = 1e-3, n_scenes: int = 8, size: int = 64):
    """Train only the patch-search weights with fusion and reconstruction frozen.

    The three embeddings start from independent random draws so matching is
    initially poor. The loss is the L1 error between the reference frame and
    the supporting frame warped through the straight-through gather, so the
    only learning signal reaching the search weights is the surrogate
    backward. Returns the match rate on the training scenes before and after.
    """
    mcfg = ModelConfig()
    rng = np.random.default_rng(seed)
    p = fgps.init_params(rng, mcfg)
    for name in ("varphi", "zeta"):
        w = p[f"{name}.w"]
        p[f"{name}.w"] = parameter(rng.standard_normal(w.shape).astype(w.data.dtype) / np.sqrt(w.shape[0]), name=f"{name}.w")
    scenes = [permutation_scene(rng, size) for _ in range(n_scenes)]
    grid = fgps.token_grid(size, size, mcfg)

    def rate():
        rates = []
        for ref, sup, perm in scenes:
            G = [Tensor(sup[None]), Tensor(ref[None]), Tensor(sup[None])]
            P_L, _, _, _ = fgps.run_fgps(G, p, mcfg)
            rates.append(match_rate(P_L[0], perm))
        return float(np.mean(rates))

    cfg = TrainConfig()
    state = AdamState(p)
    before = rate()
    history = []
    for step in range(steps):
        ref, sup, _ = scenes[step % n_scenes]
        p.zero_grad()
        with Graph() as g:
            G = [Tensor(sup[None]), Tensor(ref[None]), Tensor(sup[None])]
            _, _, M_L, M_H = fgps.run_fgps(G, p, mcfg)
            loss = None
            for M in (M_L, M_H):
                warped = scf.warp_by_search(Tensor(sup[None]), M, grid, mcfg)
                term = ops.mean(ops.abs(warped - Tensor(ref[None])))
                loss = term if loss is None else loss + term
            g.backward(loss)
        adam_step(p, state, lr, cfg)
        history.append(float(loss.data))
    return before, rate(), history

