"""Compiled kernels vs the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 5]

Each kernel is timed on training-sized inputs with both backends, and the
outputs are compared for bit-identity. A full forward/backward training step
is then timed in a subprocess per backend, since the backend is fixed at
import time.
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from wsloc import _fallback

try:
    from wsloc import _kernels
except ImportError:
    _kernels = None

STEP_SCRIPT = """
import time, numpy as np
from wsloc import kernels, nn, objective, wslnet
kernels.tune_allocator()
net = wslnet.WSLNet(nn.DESK_SCALE, wslnet.HeadSpec(), seed=0)
rng = np.random.default_rng(0)
x = rng.standard_normal((16, 96, 160, 3)).astype(np.float32)
y = (rng.random((16, 5)) < 0.5).astype(np.float32)
best = float("inf")
for _ in range({repeat} + 1):
    t = time.perf_counter()
    net.zero_grad()
    _, s = net.forward(x, "train")
    _, g = objective.wbce_loss(s, y, np.ones(5))
    net.backward(g)
    best = min(best, time.perf_counter() - t)
print(kernels.BACKEND, best)
"""


def cases():
    rng = np.random.default_rng(0)
    # first 3x3 conv of the desk backbone and a deeper stride-1 layer
    for n, h, w, c, stride in ((16, 48, 80, 16, 1), (16, 12, 20, 64, 1), (16, 96, 160, 3, 2)):
        x = rng.standard_normal((n, h, w, c)).astype(np.float32)
        oh, ow = -(-h // stride), -(-w // stride)
        pad = max((oh - 1) * stride + 3 - h, 0) // 2
        yield f"{n}x{h}x{w}x{c}/s{stride}", x, (3, 3, stride, pad, pad, oh, ow)


def best_of(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def bench_kernels(repeat):
    print(f"{'kernel':<34}{'compiled ms':>12}{'fallback ms':>13}{'speedup':>9}  identical")
    for label, x, (kh, kw, s, pt, pl, oh, ow) in cases():
        n, h, w, c = x.shape
        args = (kh, kw, s, pt, pl, oh, ow)
        ref = _fallback.im2col(x, *args)
        got = _kernels.im2col(x, *args)
        t_c = best_of(lambda: _kernels.im2col(x, *args), repeat)
        t_f = best_of(lambda: _fallback.im2col(x, *args), repeat)
        _row(f"im2col {label}", t_c, t_f, np.array_equal(ref, got))

        cols = np.random.default_rng(1).standard_normal(ref.shape).astype(np.float32)
        cargs = (n, h, w, c, kh, kw, s, pt, pl, oh, ow)
        same = np.array_equal(_fallback.col2im(cols, *cargs), _kernels.col2im(cols, *cargs))
        t_c = best_of(lambda: _kernels.col2im(cols, *cargs), repeat)
        t_f = best_of(lambda: _fallback.col2im(cols, *cargs), repeat)
        _row(f"col2im {label}", t_c, t_f, same)

    rows = np.random.default_rng(2).standard_normal((16 * 20, 12 * 20)).astype(np.float32)
    same = all(np.array_equal(a, b) for a, b in zip(_fallback.row_extrema(rows), _kernels.row_extrema(rows)))
    t_c = best_of(lambda: _kernels.row_extrema(rows), repeat)
    t_f = best_of(lambda: _fallback.row_extrema(rows), repeat)
    _row("row_extrema 320x240", t_c, t_f, same)


def _row(label, t_c, t_f, same):
    print(f"{label:<34}{t_c * 1e3:>12.3f}{t_f * 1e3:>13.3f}{t_f / t_c:>8.2f}x  {same}")


def bench_step(repeat):
    print("\nfull training step (batch 16, 96x160, desk backbone)")
    for force_py in (False, True):
        env = dict(os.environ)
        env.pop("WSLOC_PURE_PYTHON", None)
        if force_py:
            env["WSLOC_PURE_PYTHON"] = "1"
        out = subprocess.run([sys.executable, "-c", STEP_SCRIPT.format(repeat=repeat)], env=env,
                             capture_output=True, text=True, check=True).stdout.split()
        print(f"  {out[0]:<8} {float(out[1]) * 1e3:8.1f} ms/step")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--skip-step", action="store_true")
    args = ap.parse_args()
    if _kernels is None:
        sys.exit("compiled extension not built; run `pip install -e . --no-build-isolation` first")
    bench_kernels(args.repeat)
    if not args.skip_step:
        bench_step(args.repeat)


if __name__ == "__main__":
    main()
