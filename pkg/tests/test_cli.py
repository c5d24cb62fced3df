import csv
import io
import json
import subprocess
import sys

import numpy as np
import pytest

from ift import imageio, model, scene
from ift.autodiff import tenfile
from ift.cli import main


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    d = tmp_path_factory.mktemp("data")
    assert main(["gen", "--out", str(d), "--size", "32", "--motion", "6", "--n-train", "2", "--n-val", "2"]) == 0
    return d


@pytest.fixture(scope="module")
def ckpt(data, tmp_path_factory):
    out = tmp_path_factory.mktemp("ck")
    assert main(["train", "--data", str(data), "--out", str(out), "--steps", "3", "--crop", "32", "--baseline"]) == 0
    return out


def test_gen_default_count(tmp_path):
    assert main(["gen", "--out", str(tmp_path / "d"), "--size", "32"]) == 0
    manifest = json.loads((tmp_path / "d" / "manifest.json").read_text())
    assert len(manifest["samples"]) == 24
    assert len([p for p in (tmp_path / "d").iterdir() if p.is_dir()]) == 24


def test_gen_deterministic(tmp_path):
    for name in ("a", "b"):
        assert main(["gen", "--out", str(tmp_path / name), "--size", "32", "--n-train", "1", "--n-val", "1", "--seed", "4"]) == 0
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert files
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_gen_invalid_size_writes_nothing(tmp_path, capsys):
    assert main(["gen", "--out", str(tmp_path / "d"), "--size", "60"]) == 2
    assert not (tmp_path / "d").exists()
    assert "divisible" in capsys.readouterr().err


def test_config_precedence(tmp_path):
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps({"scene": {"size": [32, 32], "motion_px": 3, "seed": 9}}))
    assert main(["gen", "--out", str(tmp_path / "d"), "--config", str(cfg), "--seed", "2", "--n-train", "1", "--n-val", "0"]) == 0
    spec = json.loads((tmp_path / "d" / "manifest.json").read_text())["samples"][0]
    s = scene.load_sample(tmp_path / "d" / spec["name"])
    assert s.gt.shape == (3, 32, 32)
    assert s.meta["spec"]["motion_px"] == 3 and s.meta["spec"]["seed"] == 2


def test_train_outputs(ckpt):
    rows = list(csv.DictReader(io.StringIO((ckpt / "log.csv").read_text())))
    assert len(rows) == 3
    _, cfg, doc = model.load_checkpoint(ckpt)
    assert cfg.variant == "baseline" and doc["step"] == 3


def test_train_missing_data(tmp_path):
    assert main(["train", "--data", str(tmp_path), "--out", str(tmp_path / "o"), "--steps", "1"]) == 2


def test_train_bad_crop(data, tmp_path):
    assert main(["train", "--data", str(data), "--out", str(tmp_path / "o"), "--crop", "24"]) == 2
    assert not (tmp_path / "o").exists()


def test_ablation_flags_exclusive(data, tmp_path):
    with pytest.raises(SystemExit):
        main(["train", "--data", str(data), "--out", str(tmp_path), "--no-fgps", "--no-scf"])


def test_eval_report(ckpt, data, tmp_path, capsys):
    out = tmp_path / "r.csv"
    assert main(["eval", "--checkpoint", str(ckpt), "--data", str(data), "--out", str(out)]) == 0
    rows = list(csv.DictReader(io.StringIO(out.read_text())))
    assert len(rows) == 2
    assert {"psnr_mu", "psnr_l", "ssim_mu", "naive_psnr_mu"} <= set(rows[0])
    assert "mean" in capsys.readouterr().out
    out2 = tmp_path / "r2.csv"
    assert main(["eval", "--checkpoint", str(ckpt), "--data", str(data), "--out", str(out2), "--split", "all"]) == 0
    assert len(out2.read_text().splitlines()) == 5
    assert main(["eval", "--checkpoint", str(ckpt), "--data", str(data), "--out", str(out2)]) == 0
    assert out2.read_bytes() == out.read_bytes()


def test_eval_missing_checkpoint(data, tmp_path):
    assert main(["eval", "--checkpoint", str(tmp_path), "--data", str(data)]) == 2


def _sample_dir(data):
    name = json.loads((data / "manifest.json").read_text())["samples"][0]["name"]
    return data / name


def test_fuse_round_trip(ckpt, data, tmp_path):
    sd = _sample_dir(data)
    frames = [str(sd / f"I{k}.ten") for k in (1, 2, 3)]
    assert main(["fuse", "--checkpoint", str(ckpt), *frames, "--out", str(tmp_path / "hdr")]) == 0
    params, cfg, _ = model.load_checkpoint(ckpt)
    expected = model.fuse(scene.load_sample(sd).stack, params, cfg)
    assert np.array_equal(imageio.read_pfm(tmp_path / "hdr.pfm"), expected)
    assert imageio.read_ppm(tmp_path / "hdr.ppm").shape == (3, 32, 32)


def test_fuse_from_ppm_with_maps(data, tmp_path):
    ck = tmp_path / "full"
    assert main(["train", "--data", str(data), "--out", str(ck), "--steps", "1", "--crop", "32"]) == 0
    s = scene.load_sample(_sample_dir(data))
    paths = []
    for k, I in enumerate(s.stack.I, 1):
        paths.append(str(tmp_path / f"l{k}.ppm"))
        imageio.write_ppm(paths[-1], I, bits=16)
    maps = tmp_path / "maps"
    assert main(["fuse", "--checkpoint", str(ck), *paths, "--out", str(tmp_path / "o.pfm"), "--dump-maps", str(maps)]) == 0
    P = tenfile.load(maps / "P_L.ten")
    assert P.shape == (2, 2) and P.dtype == np.int64
    assert imageio.read_ppm(maps / "P_H.ppm").shape == (3, 16, 16)
    assert (tmp_path / "o.pfm").is_file()


def test_fuse_size_mismatch(ckpt, data, tmp_path):
    sd = _sample_dir(data)
    imageio.write_ppm(tmp_path / "small.ppm", np.zeros((3, 16, 16)))
    args = [str(sd / "I1.ten"), str(tmp_path / "small.ppm"), str(sd / "I3.ten")]
    assert main(["fuse", "--checkpoint", str(ckpt), *args, "--out", str(tmp_path / "x")]) == 2
    assert not list(tmp_path.glob("x*"))


def test_fuse_unreadable(ckpt, tmp_path):
    (tmp_path / "bad.ppm").write_bytes(b"junk")
    args = [str(tmp_path / "bad.ppm")] * 3
    assert main(["fuse", "--checkpoint", str(ckpt), *args, "--out", str(tmp_path / "x")]) == 2


def test_check_exit_code(capsys):
    assert main(["check", "attn"]) == 0
    out = capsys.readouterr().out
    assert "linear_vs_epsilon_oracle" in out and "checks passed" in out


def test_console_script_help():
    res = subprocess.run([sys.executable, "-m", "ift.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    for cmd in ("gen", "train", "fuse", "eval", "check"):
        assert cmd in res.stdout
