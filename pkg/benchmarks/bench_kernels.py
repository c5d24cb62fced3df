"""Compare the compiled and numpy kernel backends.

Times im2col, col2im and scatter_add_rows on the shapes one training step
uses, checks the two backends agree bitwise, and reports one full
forward+backward step of the model.

    python benchmarks/bench_kernels.py [--repeats N]
"""

import argparse
import os
import subprocess
import sys
import time

import numpy as np

from ift.autodiff import kernels


def best_of(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        t = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t)
    return best


def kernel_cases(rng):
    # (name, callable(backend)) on shapes from a 64x64 training step
    x = rng.standard_normal((1, 64, 32, 32)).astype(np.float32)
    x6 = rng.standard_normal((1, 6, 64, 64)).astype(np.float32)
    cols = kernels.im2col(x, 3, 3, 1, 1, backend="python")
    cols6 = kernels.im2col(x6, 3, 3, 2, 1, backend="python")
    dst = np.zeros((16, 1280), np.float32)
    src = rng.standard_normal((16, 1280)).astype(np.float32)
    idx = rng.integers(0, 16, 16)
    return [
        ("im2col 64x32x32 k3 s1", lambda b: kernels.im2col(x, 3, 3, 1, 1, backend=b)),
        ("im2col 6x64x64 k3 s2", lambda b: kernels.im2col(x6, 3, 3, 2, 1, backend=b)),
        ("col2im 64x32x32 k3 s1", lambda b: kernels.col2im(cols, 32, 32, 1, 1, backend=b)),
        ("col2im 6x64x64 k3 s2", lambda b: kernels.col2im(cols6, 64, 64, 2, 1, backend=b)),
        ("scatter_add_rows 16x1280", lambda b: kernels.scatter_add_rows(dst.copy(), idx, src, backend=b)),
    ]


STEP_SNIPPET = """
import time, numpy as np
from ift import model, scene
from ift.autodiff import Graph, ops
from ift.config import ModelConfig
s = scene.generate(scene.SceneSpec(seed=1))
cfg = ModelConfig()
p = model.init_params(cfg, 0)
I, G = model.stack_inputs([s.stack])
def step():
    p.zero_grad()
    with Graph() as g:
        out = model.forward(I, G, p, cfg).output
        g.backward(ops.mean(ops.abs(out - s.gt[None])))
step()
best = min((lambda t: (step(), time.perf_counter() - t)[1])(time.perf_counter()) for _ in range({n}))
print(best)
"""


def step_time(backend, repeats):
    env = dict(os.environ, IFT_BACKEND=backend)
    out = subprocess.run([sys.executable, "-c", STEP_SNIPPET.format(n=repeats)], env=env,
                         capture_output=True, text=True, check=True)
    return float(out.stdout.strip())


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=20)
    a = ap.parse_args()
    if kernels.BACKEND != "cython":
        print("compiled extension not built; only the numpy backend is available")
        return 1
    rng = np.random.default_rng(0)
    print(f"{'kernel':28s} {'numpy ms':>10s} {'cython ms':>10s} {'speedup':>8s}  bitwise")
    for name, fn in kernel_cases(rng):
        same = np.array_equal(fn("python"), fn("cython"))
        tp = best_of(lambda: fn("python"), a.repeats)
        tc = best_of(lambda: fn("cython"), a.repeats)
        print(f"{name:28s} {tp * 1e3:10.3f} {tc * 1e3:10.3f} {tp / tc:8.2f}  {'yes' if same else 'NO'}")
    n = max(a.repeats // 4, 3)
    tp, tc = step_time("python", n), step_time("cython", n)
    print(f"{'train step (full, 64x64)':28s} {tp * 1e3:10.3f} {tc * 1e3:10.3f} {tp / tc:8.2f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
