"""Compare the numba and numpy kernel backends.

    python3 benchmarks/bench_kernels.py [--repeat N] [--no-step]

Kernel timings call both implementations directly; the train-step timing
runs a child process per backend so SPLICE_MFCN_BACKEND takes effect.
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from splice_mfcn import _kernels as K

STEP_SNIPPET = """
import time, numpy as np
from splice_mfcn.model import ModelConfig, build_model, to_input, train_step
from splice_mfcn._kernels import BACKEND
rng = np.random.default_rng(0)
x = to_input(rng.integers(0, 256, (8, 64, 64, 3)).astype(np.uint8))
gs = (rng.random((8, 64, 64)) < 0.2).astype(int)
ge = (rng.random((8, 64, 64)) < 0.05).astype(int)
m = build_model(ModelConfig(), seed=0)
train_step(m, x, gs, ge)  # warm-up, includes jit compile
t = time.perf_counter()
for _ in range({n}):
    train_step(m, x, gs, ge)
print(BACKEND, (time.perf_counter() - t) / {n})
"""


def cases(rng):
    x = rng.standard_normal((8, 16, 66, 66))
    cols = K.im2col_numpy(x, 3, 1)
    pool_in = rng.standard_normal((8, 32, 64, 64))
    _, idx = K.maxpool2_numpy(pool_in)
    g = rng.standard_normal((8, 32, 32, 32))
    bg = rng.random((256, 256)) < 0.6
    return [
        ("im2col 8x16x66x66 k3", "im2col", (x, 3, 1)),
        ("col2im 8x16x66x66 k3", "col2im", (cols, 16, 66, 66, 3, 1)),
        ("maxpool2 8x32x64x64", "maxpool2", (pool_in,)),
        ("maxpool2_backward", "maxpool2_backward", (g, idx)),
        ("border_reach 256x256", "border_reach", (bg,)),
    ]


def bench(fn, args, repeat):
    fn(*args)
    return min(timeit.repeat(lambda: fn(*args), number=1, repeat=repeat))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--no-step", action="store_true", help="skip the end-to-end train-step timing")
    ap.add_argument("--steps", type=int, default=5)
    args = ap.parse_args()
    if not K.HAS_NUMBA:
        sys.exit("numba backend unavailable (unset SPLICE_MFCN_BACKEND=numpy or install numba)")

    rng = np.random.default_rng(0)
    print(f"{'kernel':<24}{'numpy ms':>10}{'numba ms':>10}{'speedup':>9}")
    for label, name, a in cases(rng):
        t_np = bench(getattr(K, name + "_numpy"), a, args.repeat)
        t_nb = bench(getattr(K, name + "_numba"), a, args.repeat)
        print(f"{label:<24}{t_np * 1e3:>10.2f}{t_nb * 1e3:>10.2f}{t_np / t_nb:>8.1f}x")

    if not args.no_step:
        print("\nMFCN train step, default widths, batch 8, 64x64")
        for backend in ("numpy", "numba"):
            env = {**os.environ, "SPLICE_MFCN_BACKEND": backend}
            out = subprocess.run([sys.executable, "-c", STEP_SNIPPET.format(n=args.steps)],
                                 env=env, capture_output=True, text=True, check=True)
            name, secs = out.stdout.split()
            print(f"  {name:<6} {float(secs) * 1e3:8.1f} ms/step")


if __name__ == "__main__":
    main()
