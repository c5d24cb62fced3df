"""``ift`` command line: gen, train, fuse, eval, check.

Configuration precedence is command-line flag, then the JSON file given by
``--config`` (sections ``scene``, ``model``, ``train``), then built-in
defaults. Every divisibility and range constraint is validated before any
file is written.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import __version__, checks, imageio, model, scene, training
from .autodiff import no_grad, tenfile
from .config import ModelConfig
from .fgps import token_grid
from .metrics import EvalReport, evaluate_pair
from .radiometry import DEFAULT_GAMMA, mu_law
from .scene import LdrStack, SceneSpec
from .training import TrainConfig


class CliError(Exception):
    """A user-facing failure: printed without a traceback, exit code 2."""


# ---------------------------------------------------------------- config plumbing

def _load_config(path) -> dict:
    if path is None:
        return {}
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise CliError(f"cannot read config {path}: {e}") from e
    unknown = set(doc) - {"scene", "model", "train"}
    if unknown:
        raise CliError(f"unknown config sections {sorted(unknown)}")
    return doc


def _merge(cls, file_values: dict, flags: dict):
    """Build ``cls`` from defaults, then file values, then non-None flags."""
    names = {f.name for f in fields(cls)}
    unknown = set(file_values) - names
    if unknown:
        raise CliError(f"unknown {cls.__name__} keys {sorted(unknown)}")
    values = dict(file_values)
    values.update({k: v for k, v in flags.items() if k in names and v is not None})
    return cls.from_json(values)


def _scene_flags(a) -> dict:
    return {
        "size": None if a.size is None else (a.size, a.size),
        "n_objects": a.n_objects,
        "motion_px": a.motion,
        "dynamic_range": a.dynamic_range,
        "seed": a.seed,
        "bits": a.bits,
    }


def _model_flags(a) -> dict:
    variant = None
    if a.baseline:
        variant = "baseline"
    elif a.no_fgps:
        variant = "no_fgps"
    elif a.no_scf:
        variant = "no_scf"
    return {
        "C": a.C, "d": a.d, "heads": a.heads, "window": a.window, "depth": a.depth,
        "scf_patch": a.scf_patch, "fgps_patch": a.fgps_patch, "D": a.D,
        "normalize": False if a.no_normalize else None, "variant": variant,
    }


def _train_flags(a) -> dict:
    return {"steps": a.steps, "seed": a.seed, "crop": a.crop, "lambda_p": a.lambda_p,
            "lr0": a.lr0, "lr_end": a.lr_end, "val_every": a.val_every}


def _validated(fn):
    try:
        return fn()
    except (ValueError, TypeError) as e:
        raise CliError(f"invalid configuration: {e}") from e


# ---------------------------------------------------------------- commands

def cmd_gen(a) -> int:
    doc = _load_config(a.config)
    spec = _merge(SceneSpec, doc.get("scene", {}), _scene_flags(a))
    mcfg = _merge(ModelConfig, doc.get("model", {}), {})
    _validated(lambda: (mcfg.validate(), spec.validate(mcfg.input_multiple())))
    manifest = scene.write_dataset(a.out, spec, a.n_train, a.n_val)
    print(f"wrote {len(manifest['samples'])} samples to {a.out}")
    return 0


def cmd_train(a) -> int:
    doc = _load_config(a.config)
    mcfg = _merge(ModelConfig, doc.get("model", {}), _model_flags(a))
    tcfg = _merge(TrainConfig, doc.get("train", {}), _train_flags(a))
    _validated(lambda: (mcfg.validate(tcfg.crop, tcfg.crop), tcfg.validate(mcfg.input_multiple())))
    data = Path(a.data)
    if not (data / "manifest.json").is_file():
        raise CliError(f"no dataset manifest in {data}")
    train_set = scene.load_dataset(data, "train")
    val_set = scene.load_dataset(data, "val")
    if not train_set:
        raise CliError(f"dataset {data} has no training samples")
    for s in train_set + val_set:
        _validated(lambda s=s: mcfg.validate(*s.gt.shape[-2:]))

    def progress(row):
        if a.verbose and (row["step"] % 100 == 0 or row["val_psnr_mu"] is not None):
            val = "" if row["val_psnr_mu"] is None else f"  val_psnr_mu {row['val_psnr_mu']:.3f}"
            print(f"step {row['step']:5d}  lr {row['lr']:.3e}  loss {row['train_loss']:.5f}{val}", flush=True)

    res = training.train(train_set, val_set, tcfg, mcfg, out_dir=a.out, progress=progress)
    print(f"checkpoint written to {a.out}; final val PSNR-mu {res.val_psnr_mu:.3f} dB")
    return 0


def _read_ldr(path) -> np.ndarray:
    p = Path(path)
    try:
        if p.suffix == ".ten":
            return tenfile.load(p).astype(np.float32)
        return imageio.read_ppm(p)
    except (OSError, ValueError) as e:
        raise CliError(f"cannot read {path}: {e}") from e


def cmd_fuse(a) -> int:
    params, mcfg, _ = _load_checkpoint(a.checkpoint)
    frames = [_read_ldr(p) for p in (a.ldr1, a.ldr2, a.ldr3)]
    shapes = [f.shape for f in frames]
    if len(set(shapes)) != 1:
        raise CliError(f"LDR frames differ in size: {shapes}")
    if frames[0].ndim != 3 or frames[0].shape[0] != 3:
        raise CliError(f"expected RGB frames, got shape {frames[0].shape}")
    _validated(lambda: mcfg.validate(*frames[0].shape[-2:]))
    stack = LdrStack.from_ldr(frames, a.evs, a.gamma)
    out = Path(a.out)
    if out.suffix:
        out = out.with_suffix("")
    hdr, maps = _fuse_with_maps(stack, params, mcfg)
    out.parent.mkdir(parents=True, exist_ok=True)
    imageio.write_pfm(out.with_suffix(".pfm"), hdr)
    imageio.write_ppm(out.with_suffix(".ppm"), mu_law(hdr.astype(np.float64)))
    written = [out.with_suffix(".pfm"), out.with_suffix(".ppm")]
    if a.dump_maps:
        d = Path(a.dump_maps)
        d.mkdir(parents=True, exist_ok=True)
        if maps is None:
            print("variant has no patch search; no position maps to dump", file=sys.stderr)
        else:
            for name, (P, grid) in maps.items():
                tenfile.save(d / f"{name}.ten", np.asarray(P, dtype=np.int64).reshape(grid))
                imageio.write_ppm(d / f"{name}.ppm", np.kron(imageio.heatmap(P, grid), np.ones((1, 8, 8))))
                written += [d / f"{name}.ten", d / f"{name}.ppm"]
    for w in written:
        print(f"wrote {w}")
    return 0


def _fuse_with_maps(stack, params, mcfg):
    dtype = next(iter(params.values())).dtype
    with no_grad():
        I, G = model.stack_inputs([stack], dtype=dtype)
        res = model.forward(I, G, params, mcfg)
    maps = None
    if res.P_L is not None:
        grid = token_grid(*stack.shape[-2:], mcfg)
        maps = {"P_L": (res.P_L[0], grid), "P_H": (res.P_H[0], grid)}
    return res.output.data[0], maps


def _load_checkpoint(path):
    try:
        return model.load_checkpoint(path)
    except (OSError, KeyError, ValueError) as e:
        raise CliError(f"cannot load checkpoint {path}: {e}") from e


def cmd_eval(a) -> int:
    params, mcfg, _ = _load_checkpoint(a.checkpoint)
    data = Path(a.data)
    if not (data / "manifest.json").is_file():
        raise CliError(f"no dataset manifest in {data}")
    manifest = json.loads((data / "manifest.json").read_text())
    entries = [e for e in manifest["samples"] if a.split == "all" or e["split"] == a.split]
    if not entries:
        raise CliError(f"no samples in split {a.split!r}")
    report = eval_report(params, mcfg, [(e["name"], scene.load_sample(data / e["name"])) for e in entries])
    csv_text = report.to_csv()
    if a.out:
        Path(a.out).write_text(csv_text)
    print(report.table())
    return 0


def eval_report(params, mcfg, named_samples) -> EvalReport:
    cols = ["psnr_mu", "psnr_l", "ssim_mu", "naive_psnr_mu", "naive_psnr_l", "naive_ssim_mu"]
    report = EvalReport(cols)
    for name, s in named_samples:
        _validated(lambda s=s: mcfg.validate(*s.gt.shape[-2:]))
        fused = model.fuse(s.stack, params, mcfg)
        naive = scene.naive_merge(s.stack)
        scores = evaluate_pair(fused, s.gt)
        scores.update({f"naive_{k}": v for k, v in evaluate_pair(naive, s.gt).items()})
        report.add(name, **scores)
    return report


def cmd_check(a) -> int:
    results = checks.run(a.suite, a.seed)
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return 1 if failed else 0


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ift", description="Image fusion transformer for multi-exposure HDR deghosting.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="cmd", required=True)

    g = sub.add_parser("gen", help="generate a synthetic dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--config")
    g.add_argument("--size", type=int, help="square image side (default 64)")
    g.add_argument("--n-objects", type=int)
    g.add_argument("--motion", type=int, help="max per-frame object translation in pixels")
    g.add_argument("--dynamic-range", type=float)
    g.add_argument("--bits", type=int, choices=(8, 16))
    g.add_argument("--seed", type=int)
    g.add_argument("--n-train", type=int, default=16)
    g.add_argument("--n-val", type=int, default=8)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train a model on a generated dataset")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--config")
    t.add_argument("--steps", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--crop", type=int)
    t.add_argument("--lambda-p", type=float)
    t.add_argument("--lr0", type=float)
    t.add_argument("--lr-end", type=float)
    t.add_argument("--val-every", type=int)
    for name in ("C", "d", "heads", "window", "depth", "D"):
        t.add_argument(f"--{name}", type=int, dest=name)
    t.add_argument("--scf-patch", type=int)
    t.add_argument("--fgps-patch", type=int)
    t.add_argument("--no-normalize", action="store_true", help="drop the linear-attention denominator")
    ab = t.add_mutually_exclusive_group()
    ab.add_argument("--no-fgps", action="store_true", help="no patch search or warped streams (BL+SCF)")
    ab.add_argument("--no-scf", action="store_true", help="warped streams concatenated without SAAT (BL+FGPS)")
    ab.add_argument("--baseline", action="store_true", help="reconstruction on conv features only (BL)")
    t.add_argument("-v", "--verbose", action="store_true")
    t.set_defaults(func=cmd_train)

    f = sub.add_parser("fuse", help="fuse three LDR frames (PPM or .ten) into an HDR image")
    f.add_argument("--checkpoint", required=True)
    f.add_argument("ldr1")
    f.add_argument("ldr2")
    f.add_argument("ldr3")
    f.add_argument("--evs", type=float, nargs=3, default=(-2.0, 0.0, 2.0))
    f.add_argument("--gamma", type=float, default=DEFAULT_GAMMA)
    f.add_argument("--out", required=True, help="output path stem; writes <stem>.pfm and <stem>.ppm")
    f.add_argument("--dump-maps", metavar="DIR", help="write position maps as .ten and PPM heatmaps")
    f.set_defaults(func=cmd_fuse)

    e = sub.add_parser("eval", help="evaluate a checkpoint against ground truth")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="val", choices=("train", "val", "all"))
    e.add_argument("--out", help="CSV report path")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("check", help="run verification suites")
    c.add_argument("suite", nargs="?", default="all", choices=("grad", "oracle", "attn", "all"))
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=cmd_check)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as e:
        print(f"ift: error: {e}", file=sys.stderr)
        return 2
    except FloatingPointError as e:
        print(f"ift: training aborted: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
