"""Verification suites: finite-difference gradients, brute-force oracles, linear attention.

Each suite returns a list of :class:`CheckResult`; ``ift check`` prints them
and exits nonzero when any fails. The test suite calls the same functions.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from . import fgps, lrt, model, scf, training
from .autodiff import Graph, Tensor, default_dtype, no_grad, ops, parameter
from .autodiff.gradcheck import analytic_grads, directional_grad, numeric_grad, rel_error
from .config import ModelConfig
from .metrics import psnr, ssim
from .radiometry import mu_law


@dataclass
class CheckResult:
    suite: str
    name: str
    value: float
    tol: float
    passed: bool
    note: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        note = f"  ({self.note})" if self.note else ""
        return f"[{status}] {self.suite}/{self.name}: {self.value:.3g} (tol {self.tol:g}){note}"


def _below(suite, name, value, tol, note=""):
    return CheckResult(suite, name, float(value), tol, bool(value < tol), note)


def _exact(suite, name, value, note="exact"):
    return CheckResult(suite, name, float(value), 0.0, bool(value == 0), note)


def _above(suite, name, value, tol, note=""):
    return CheckResult(suite, name, float(value), tol, bool(value > tol), note)


# ---------------------------------------------------------------- gradients

def _fd_inputs(fn, inputs, eps=1e-5):
    grads = analytic_grads(fn, inputs)
    return max(rel_error(g, numeric_grad(fn, t, eps)) for g, t in zip(grads, inputs))


def _leaf(rng, *shape, positive=False):
    x = rng.standard_normal(shape)
    if positive:
        x = np.abs(x) + 0.5
    return parameter(x)


def op_gradient_errors(seed: int = 0) -> dict:
    """Worst FD relative error for each differentiable op on random f64 input."""
    rng = np.random.default_rng(seed)
    out = {}
    with default_dtype(np.float64):
        a, b = _leaf(rng, 5, 7), _leaf(rng, 7, 3)
        R = rng.standard_normal((5, 3))
        out["matmul"] = _fd_inputs(lambda: ops.sum(ops.matmul(a, b) * R), [a, b])

        x, w, bias = _leaf(rng, 2, 3, 8, 8), _leaf(rng, 4, 3, 3, 3), _leaf(rng, 4)
        R = rng.standard_normal((2, 4, 4, 4))
        out["conv2d"] = _fd_inputs(lambda: ops.sum(ops.conv2d(x, w, bias, stride=2, pad=1) * R), [x, w, bias])

        u, v = _leaf(rng, 3, 4), _leaf(rng, 4)
        p = _leaf(rng, 3, 4, positive=True)
        R = rng.standard_normal((3, 4))
        binary = {"add": ops.add, "sub": ops.sub, "mul": ops.mul}
        for name, f in binary.items():
            out[name] = _fd_inputs(lambda f=f: ops.sum(f(u, v) * R), [u, v])
        out["div"] = _fd_inputs(lambda: ops.sum(ops.div(u, p) * R), [u, p])
        unary = {
            "exp": lambda: ops.exp(u), "elu": lambda: ops.elu(u), "relu": lambda: ops.relu(u),
            "sigmoid": lambda: ops.sigmoid(u), "log": lambda: ops.log(p), "sqrt": lambda: ops.sqrt(p),
            "pow": lambda: ops.pow(p, 1.7), "abs": lambda: ops.abs(u),
        }
        for name, f in unary.items():
            leaf = p if name in ("log", "sqrt", "pow") else u
            out[name] = _fd_inputs(lambda f=f: ops.sum(f() * R), [leaf])

        s = _leaf(rng, 4, 6)
        R = rng.standard_normal((4, 6))
        out["softmax"] = _fd_inputs(lambda: ops.sum(ops.softmax(s, axis=-1) * R), [s])
        out["layer_norm"] = _fd_inputs(lambda: ops.sum(ops.layer_norm(s) * R), [s])
        out["sum"] = _fd_inputs(lambda: ops.sum(ops.sum(s, axis=0) * R[0]), [s])
        out["mean"] = _fd_inputs(lambda: ops.sum(ops.mean(s, axis=1) * R[:, 0]), [s])
        out["max"] = _fd_inputs(lambda: ops.sum(ops.max(s, axis=1) * R[:, 0]), [s])

        img = _leaf(rng, 1, 3, 8, 8)
        perm = rng.permutation(16)
        R8 = rng.standard_normal((1, 3, 8, 8))
        out["gather_patches"] = _fd_inputs(lambda: ops.sum(ops.gather_patches(img, perm, 2) * R8), [img])
        out["avg_pool2d"] = _fd_inputs(lambda: ops.sum(ops.avg_pool2d(img, 2) * R8[..., :4, :4]), [img])
        R16 = rng.standard_normal((1, 3, 16, 16))
        out["upsample_nearest"] = _fd_inputs(lambda: ops.sum(ops.upsample_nearest(img, 2) * R16), [img])
    return out


def ste_surrogate_errors(seed: int = 0) -> dict:
    """STE: hard forward vs gather, and backward vs the softmax surrogate."""
    rng = np.random.default_rng(seed)
    out = {}
    with default_dtype(np.float64):
        f, M = _leaf(rng, 6, 5), _leaf(rng, 6, 6)
        R = rng.standard_normal((6, 5))
        hard = fgps.ste_gather(f, M).data
        out["forward_vs_gather"] = float(np.max(np.abs(hard - f.data[fgps.position_map(M)])))
        ste = analytic_grads(lambda: ops.sum(fgps.ste_gather(f, M) * R), [f, M])
        soft = analytic_grads(lambda: ops.sum(fgps.soft_gather(f, M) * R), [f, M])
        out["backward_vs_surrogate"] = max(float(np.max(np.abs(a - b))) for a, b in zip(ste, soft))
        out["surrogate_fd"] = _fd_inputs(lambda: ops.sum(fgps.soft_gather(f, M) * R), [f, M])
    return out


def module_gradient_errors(seed: int = 0) -> dict:
    """FD checks for warp, channel attention, window attention, SAAT and the perceptual loss."""
    rng = np.random.default_rng(seed)
    out = {}
    with default_dtype(np.float64):
        f = _leaf(rng, 1, 4, 8, 8)
        P = rng.integers(0, 16, 16)
        R = rng.standard_normal((1, 4, 8, 8))
        out["warp"] = _fd_inputs(lambda: ops.sum(scf.warp(f, P, 2) * R), [f])

        cfg = ModelConfig(D=8, lrt_heads=2, window=4, C=4, d=4, heads=2)
        lp = lrt.init_params(rng, cfg, 4)
        x = _leaf(rng, 1, 8, 8, 8)
        R = rng.standard_normal((1, 8, 8, 8))
        w1, w2 = lp["blocks.0.ca.fc1.w"], lp["blocks.0.ca.fc2.w"]
        out["channel_attention"] = _fd_inputs(lambda: ops.sum(lrt.channel_attention(x, w1, w2) * R), [x, w1, w2])
        mp = lp.scope("blocks.0.msa")
        leaves = [x] + list(mp.values())
        out["window_msa"] = _fd_inputs(lambda: ops.sum(lrt.window_msa(x, mp, 4, 2) * R), leaves)

        sp = scf.init_params(rng, cfg)
        streams = {s: _leaf(rng, 1, 4, 16, 16) for s in cfg.streams}
        R = rng.standard_normal((1, 4 * len(cfg.streams), 16, 16))
        leaves = list(streams.values()) + [v for k, v in sp.items() if not k.startswith("conv")]
        out["saat"] = _fd_inputs(lambda: ops.sum(scf.saat(streams, sp, cfg).concat * R), leaves)

        ext = training.PerceptualExtractor(dtype=np.float64)
        O = parameter(rng.uniform(0.05, 0.95, (1, 3, 8, 8)))
        gt = Tensor(rng.uniform(0.05, 0.95, (1, 3, 8, 8)))
        out["loss_perceptual"] = _fd_inputs(lambda: training.loss_perceptual(O, gt, ext), [O])
    return out


def model_gradient_errors(variant: str = "full", ste_mode: str = "soft", size: int = 32, seed: int = 0,
                          skip_prefix: tuple = (), spot: int = 2) -> dict:
    """Per-parameter-tensor FD check of the whole network in f64.

    Each tensor is probed along one random sign-aligned direction plus its largest-gradient
    entry and ``spot`` random entries; the reported error is the worst of those.
    """
    rng = np.random.default_rng(seed)
    cfg = ModelConfig(variant=variant, ste_mode=ste_mode)
    with default_dtype(np.float64):
        p = model.init_params(cfg, seed)
        I = [Tensor(rng.uniform(0, 1, (1, 3, size, size))) for _ in range(3)]
        G = [Tensor(x.data ** 2.2) for x in I]
        R = rng.standard_normal((1, 3, size, size))

        def loss():
            out = model.forward(I, G, p, cfg).output
            return ops.mean(mu_law(out) * R)

        names = [k for k in p if not k.startswith(skip_prefix)] if skip_prefix else list(p)
        grads = dict(zip(p.keys(), analytic_grads(loss, list(p.values()))))
        errs = {}
        for k in names:
            t, g = p[k], grads[k]
            # sign-aligned so the directional derivative cannot cancel to roundoff
            d = np.abs(rng.standard_normal(t.shape)) * np.where(g < 0, -1.0, 1.0)
            an = float(np.sum(g * d))
            fd = directional_grad(loss, t, d)
            worst = abs(an - fd) / max(abs(an), abs(fd), 1e-300)
            flat = g.reshape(-1)
            idx = [int(np.argmax(np.abs(flat)))] + [int(i) for i in rng.integers(0, flat.size, spot)]
            num = numeric_grad(loss, t, index=idx)
            ana = flat[idx]
            worst = max(worst, rel_error(ana, num))
            errs[k] = worst
    return errs


HARD_STE_UPSTREAM = ("fgps.", "scf.conv1.", "scf.conv3.")


def grad_suite(seed: int = 0) -> list[CheckResult]:
    res = []
    for name, e in op_gradient_errors(seed).items():
        res.append(_below("grad", f"op.{name}", e, 1e-4))
    ste = ste_surrogate_errors(seed)
    res.append(_exact("grad", "ste.forward_vs_gather", ste["forward_vs_gather"], "bitwise"))
    res.append(_below("grad", "ste.backward_vs_surrogate", ste["backward_vs_surrogate"], 1e-6))
    res.append(_below("grad", "ste.surrogate_fd", ste["surrogate_fd"], 1e-4))
    for name, e in module_gradient_errors(seed).items():
        res.append(_below("grad", f"module.{name}", e, 1e-4))
    soft = model_gradient_errors("full", "soft", seed=seed)
    k = max(soft, key=soft.get)
    res.append(_below("grad", "model.full.soft_ste", soft[k], 1e-4, f"{len(soft)} tensors, worst {k}"))
    # search weights and the two supporting-frame convs sit upstream of the
    # straight-through gather, whose backward is the surrogate by contract
    hard = model_gradient_errors("full", "hard", seed=seed, skip_prefix=HARD_STE_UPSTREAM)
    k = max(hard, key=hard.get)
    res.append(_below("grad", "model.full.hard_ste", hard[k], 1e-4, f"{len(hard)} tensors off the STE path, worst {k}"))
    return res


# ---------------------------------------------------------------- brute-force oracles

def brute_force_position_map(Q: np.ndarray, K: np.ndarray) -> list[int]:
    """O(n^2) scalar search for each query's most cosine-similar key (first on ties)."""
    qn = [q / (math.sqrt(float(q @ q)) + 1e-300) for q in Q]
    kn = [k / (math.sqrt(float(k @ k)) + 1e-300) for k in K]
    out = []
    for q in qn:
        best, arg = -math.inf, 0
        for j, k in enumerate(kn):
            s = float(q @ k)
            if s > best:
                best, arg = s, j
        out.append(arg)
    return out


def fgps_oracle_mismatches(instances: int = 100, seed: int = 0, max_n: int = 1024) -> tuple[int, int]:
    """Return ``(instances with any mismatch, total instances)``."""
    rng = np.random.default_rng(seed)
    bad = 0
    for i in range(instances):
        n = int(np.exp(rng.uniform(np.log(2), np.log(max_n))))
        if i == 0:
            n = max_n
        d = int(rng.integers(2, 33))
        Q = rng.standard_normal((n, d))
        K = rng.standard_normal((n, d))
        if i % 10 == 1:
            # duplicated keys force exact ties
            K[n // 2:] = K[: n - n // 2]
        with default_dtype(np.float64), no_grad():
            P = fgps.position_map(fgps.similarity(Tensor(Q), Tensor(K)))
        if list(P) != brute_force_position_map(Q, K):
            bad += 1
    return bad, instances


def permutation_recovery(scenes: int = 5, seed: int = 0) -> float:
    """Fraction of exactly recovered position maps on block-permuted scenes."""
    rng = np.random.default_rng(seed)
    cfg = ModelConfig()
    p = fgps.init_params(rng, cfg)
    ok = 0
    for _ in range(scenes):
        ref, sup, perm = training.permutation_scene(rng)
        with no_grad():
            P_L, P_H, _, _ = fgps.run_fgps([Tensor(sup[None]), Tensor(ref[None]), Tensor(sup[None])], p, cfg)
        ok += int(np.array_equal(P_L[0], perm) and np.array_equal(P_H[0], perm))
    return ok / scenes


def loop_conv2d(x, w, b, stride, pad):
    B, C, H, W = x.shape
    O, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    Ho, Wo = (H + 2 * pad - kh) // stride + 1, (W + 2 * pad - kw) // stride + 1
    out = np.zeros((B, O, Ho, Wo))
    for n in range(B):
        for o in range(O):
            for i in range(Ho):
                for j in range(Wo):
                    acc = b[o]
                    for c in range(C):
                        for u in range(kh):
                            for v in range(kw):
                                acc += w[o, c, u, v] * xp[n, c, i * stride + u, j * stride + v]
                    out[n, o, i, j] = acc
    return out


def loop_gather_patches(x, idx, patch):
    B, C, H, W = x.shape
    gw = W // patch
    out = np.empty_like(x)
    for i, src in enumerate(idx):
        ty, tx = divmod(i, gw)
        sy, sx = divmod(int(src), gw)
        for c in range(C):
            for u in range(patch):
                for v in range(patch):
                    out[:, c, ty * patch + u, tx * patch + v] = x[:, c, sy * patch + u, sx * patch + v]
    return out


def loop_psnr(a, b, peak=1.0):
    a, b = np.ravel(a), np.ravel(b)
    s = 0.0
    for u, v in zip(a, b):
        s += (float(u) - float(v)) ** 2
    mse = s / a.size
    return 100.0 if mse == 0 else 10 * math.log10(peak * peak / mse)


def loop_ssim(a, b, size=11, sigma=1.5, K1=0.01, K2=0.03, L=1.0):
    a, b = np.asarray(a, float), np.asarray(b, float)
    if a.ndim == 2:
        a, b = a[None], b[None]
    half = size // 2
    g = [math.exp(-((i - half) ** 2) / (2 * sigma * sigma)) for i in range(size)]
    tot = sum(g)
    g = [v / tot for v in g]
    C1, C2 = (K1 * L) ** 2, (K2 * L) ** 2
    chans = []
    for c in range(a.shape[0]):
        x, y = a[c], b[c]
        H, W = x.shape
        vals = []
        for i in range(H - size + 1):
            for j in range(W - size + 1):
                mx = my = sxx = syy = sxy = 0.0
                for u in range(size):
                    for v in range(size):
                        wgt = g[u] * g[v]
                        p, q = x[i + u, j + v], y[i + u, j + v]
                        mx += wgt * p
                        my += wgt * q
                        sxx += wgt * p * p
                        syy += wgt * q * q
                        sxy += wgt * p * q
                vx, vy, cxy = sxx - mx * mx, syy - my * my, sxy - mx * my
                vals.append(((2 * mx * my + C1) * (2 * cxy + C2)) / ((mx * mx + my * my + C1) * (vx + vy + C2)))
        chans.append(sum(vals) / len(vals))
    return sum(chans) / len(chans)


def loop_window_msa(x, p, window, heads):
    B, H, W, D = x.shape
    dh = D // heads
    qkv_w, qkv_b = p["qkv.w"].data, p["qkv.b"].data
    pw, pb = p["proj.w"].data, p["proj.b"].data
    out = np.zeros_like(x)
    for n in range(B):
        for wy in range(0, H, window):
            for wx in range(0, W, window):
                toks = [x[n, wy + u, wx + v] for u in range(window) for v in range(window)]
                qkv = [t @ qkv_w + qkv_b for t in toks]
                merged = [np.zeros(D) for _ in toks]
                for h in range(heads):
                    sl = slice(h * dh, (h + 1) * dh)
                    q = [r[:D][sl] for r in qkv]
                    k = [r[D:2 * D][sl] for r in qkv]
                    v = [r[2 * D:][sl] for r in qkv]
                    for i in range(len(toks)):
                        logits = [float(q[i] @ k[j]) / math.sqrt(dh) for j in range(len(toks))]
                        m = max(logits)
                        e = [math.exp(l - m) for l in logits]
                        z = sum(e)
                        merged[i][sl] = sum(e[j] / z * v[j] for j in range(len(toks)))
                for i, (u, v) in enumerate((u, v) for u in range(window) for v in range(window)):
                    out[n, wy + u, wx + v] = merged[i] @ pw + pb
    return out


def oracle_suite(seed: int = 0, instances: int = 100) -> list[CheckResult]:
    res = []
    bad, n = fgps_oracle_mismatches(instances, seed)
    res.append(_exact("oracle", "fgps.position_map", bad, f"mismatching instances of {n}, n <= 1024"))
    rate = permutation_recovery(seed=seed)
    res.append(CheckResult("oracle", "fgps.permutation_recovery", rate, 1.0, rate == 1.0, "fraction exact"))

    rng = np.random.default_rng(seed)
    with default_dtype(np.float64), no_grad():
        Q, K = rng.standard_normal((32, 16)), rng.standard_normal((32, 16))
        M = fgps.similarity(Tensor(Q), Tensor(K)).data
        loop = np.array([[float(q @ k) / (math.sqrt(float(q @ q)) * math.sqrt(float(k @ k))) for k in K] for q in Q])
        res.append(_below("oracle", "fgps.similarity", np.max(np.abs(M - loop)), 1e-6))

        x, w, b = rng.standard_normal((2, 3, 7, 7)), rng.standard_normal((4, 3, 3, 3)), rng.standard_normal(4)
        got = ops.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=2, pad=1).data
        res.append(_below("oracle", "conv2d", np.max(np.abs(got - loop_conv2d(x, w, b, 2, 1))), 1e-10))

        img = rng.standard_normal((1, 3, 8, 8))
        perm = rng.permutation(16)
        got = ops.gather_patches(Tensor(img), perm, 2).data
        res.append(_exact("oracle", "gather_patches", np.max(np.abs(got - loop_gather_patches(img, perm, 2)))))

        Q, K, V = rng.standard_normal((64, 8)), rng.standard_normal((64, 8)), rng.standard_normal((64, 5))
        got = scf.attention_quadratic(Tensor(Q), Tensor(K), Tensor(V)).data
        loop = np.zeros((64, 5))
        for i in range(64):
            logits = [float(Q[i] @ K[j]) / math.sqrt(8) for j in range(64)]
            m = max(logits)
            e = [math.exp(l - m) for l in logits]
            loop[i] = sum(e[j] * V[j] for j in range(64)) / sum(e)
        res.append(_below("oracle", "attention_quadratic", np.max(np.abs(got - loop)), 1e-5))

        cfg = ModelConfig(D=8, lrt_heads=2)
        lp = lrt.init_params(rng, cfg, 4).scope("blocks.0.msa")
        for v in lp.values():
            v.data[...] = rng.standard_normal(v.shape)
        x = rng.standard_normal((1, 8, 16, 8))
        got = lrt.window_msa(Tensor(x), lp, 8, 2).data
        res.append(_below("oracle", "window_msa", np.max(np.abs(got - loop_window_msa(x, lp, 8, 2))), 1e-5))

    a, b = rng.uniform(0, 1, (3, 16, 16)), rng.uniform(0, 1, (3, 16, 16))
    res.append(_below("oracle", "metrics.psnr", abs(psnr(a, b) - loop_psnr(a, b)), 1e-9))
    res.append(_below("oracle", "metrics.ssim", abs(ssim(a, b) - loop_ssim(a, b)), 1e-6))
    res.append(_below("oracle", "metrics.ssim_self", abs(ssim(a, a) - 1.0), 1e-9))
    return res


# ---------------------------------------------------------------- linear attention

def epsilon_kernel_oracle(Q, K, V):
    """Left-to-right ``(eps(Q) eps(K)^T) V`` with row normalization; materializes ``n x m``."""
    q = np.where(Q > 0, Q + 1.0, np.exp(Q))
    k = np.where(K > 0, K + 1.0, np.exp(K))
    A = q @ k.T
    W = A / A.sum(axis=-1, keepdims=True)
    return W @ V, W


def linear_attention_deviation(seed: int = 0, trials: int = 20, max_n: int = 256) -> dict:
    rng = np.random.default_rng(seed)
    dev = rowsum = 0.0
    minw = math.inf
    with default_dtype(np.float64), no_grad():
        for _ in range(trials):
            n, m = (int(v) for v in rng.integers(1, max_n + 1, 2))
            d, dv = (int(v) for v in rng.integers(1, 33, 2))
            Q, K, V = rng.standard_normal((n, d)), rng.standard_normal((m, d)), rng.standard_normal((m, dv))
            got = scf.attention_linear(Tensor(Q), Tensor(K), Tensor(V), normalize=True).data
            ref, W = epsilon_kernel_oracle(Q, K, V)
            dev = max(dev, float(np.max(np.abs(got - ref))))
            rowsum = max(rowsum, float(np.max(np.abs(W.sum(-1) - 1))))
            minw = min(minw, float(W.min()))
        V1 = rng.standard_normal((1, 7))
        single = scf.attention_linear(Tensor(rng.standard_normal((9, 4))), Tensor(rng.standard_normal((1, 4))), Tensor(V1)).data
    return {"max_dev": dev, "max_rowsum_err": rowsum, "min_weight": minw,
            "single_key_err": float(np.max(np.abs(single - V1)))}


def _best_time(fn, repeats):
    best = math.inf
    for _ in range(repeats):
        t = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t)
    return best


def attention_scaling(seed: int = 0, small: int = 1024, large: int = 4096, d: int = 32, repeats: int = 5) -> dict:
    """Best-of-``repeats`` wall-clock ratio ``time(large)/time(small)`` for both attention forms."""
    rng = np.random.default_rng(seed)
    out = {}
    with default_dtype(np.float64), no_grad():
        for name, fn in (("linear", lambda Q, K, V: scf.attention_linear(Q, K, V)),
                         ("quadratic", scf.attention_quadratic)):
            times = []
            for n in (small, large):
                Q, K, V = (Tensor(rng.standard_normal((n, d))) for _ in range(3))
                fn(Q, K, V)
                times.append(_best_time(lambda: fn(Q, K, V), repeats))
            out[name] = times[1] / times[0]
    return out


def attn_suite(seed: int = 0) -> list[CheckResult]:
    d = linear_attention_deviation(seed)
    res = [
        _below("attn", "linear_vs_epsilon_oracle", d["max_dev"], 1e-10, "f64, n,m <= 256"),
        _below("attn", "row_sums", d["max_rowsum_err"], 1e-6),
        _above("attn", "min_weight", d["min_weight"], 0.0, "weights strictly positive"),
        _below("attn", "single_key_equals_value", d["single_key_err"], 1e-10, "up to the 1e-12 denominator guard"),
    ]
    r = attention_scaling(seed)
    res.append(_below("attn", "linear_time_ratio_4096_1024", r["linear"], 6.0))
    res.append(_above("attn", "quadratic_time_ratio_4096_1024", r["quadratic"], 10.0))
    return res


SUITES = {"grad": grad_suite, "oracle": oracle_suite, "attn": attn_suite}


def run(suite: str = "all", seed: int = 0) -> list[CheckResult]:
    names = list(SUITES) if suite == "all" else [suite]
    res = []
    for name in names:
        if name not in SUITES:
            raise ValueError(f"unknown suite {name!r}; choose from {sorted(SUITES)} or 'all'")
        res.extend(SUITES[name](seed))
    return res
