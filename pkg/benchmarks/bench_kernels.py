"""Compare the compiled convolution kernels with the numpy fallback.

Usage: python3 benchmarks/bench_kernels.py [--repeat N]

Times forward and backward of one dilated causal convolution at a few
shapes, then one full training epoch through the public API with each
backend selected via AMPAL_PURE_PYTHON.
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from ampal import _kernels_py

try:
    from ampal import _kernels
except ImportError:
    _kernels = None

SHAPES = [  # (batch, channels, length, dilation)
    (4, 4, 1024, 1),
    (4, 4, 1024, 16),
    (8, 8, 4096, 4),
    (8, 8, 4096, 64),
]

EPOCH_SNIPPET = """
import time, numpy as np
from ampal import kernels
from ampal.model import ModelConfig, init_model
from ampal.oracle import label
from ampal.signals import plucked_dry
from ampal.training import LabeledDataset, TrainConfig, train_model
ds = LabeledDataset(plucked_dry(4096 / 16000, 16000, 1, mean_note=0.03))
for g in np.random.default_rng(0).uniform(size=(8, 6)):
    label(ds, g)
mc = ModelConfig(channels=4, dilations=(1, 2, 4, 8, 16, 32), head_channels=4)
t = time.perf_counter()
train_model(init_model(mc, 0), ds, TrainConfig(epochs=3, chunk_length=1024, batch_size=4, lr=1e-2))
print(kernels.BACKEND, (time.perf_counter() - t) / 3)
"""


def bench(mod, shape, dtype, repeat):
    B, C, T, d = shape
    rng = np.random.default_rng(0)
    pad = 2 * d
    x = rng.standard_normal((B, C, T)).astype(dtype)
    w = rng.standard_normal((C, C, 3)).astype(dtype)
    go = rng.standard_normal((B, C, T)).astype(dtype)
    fwd = min(timeit.repeat(lambda: mod.conv1d_forward(x, w, d, pad), number=1, repeat=repeat))
    bwd = min(timeit.repeat(lambda: mod.conv1d_backward(go, x, w, d, pad), number=1, repeat=repeat))
    return fwd, bwd


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    if _kernels is None:
        print("compiled extension not built; only the numpy fallback is available")
    print(f"{'shape (B,C,T,d)':<22}{'dtype':<9}{'numpy fwd':>11}{'cython fwd':>12}{'numpy bwd':>11}{'cython bwd':>12}{'speedup':>9}")
    for shape in SHAPES:
        for dtype in (np.float32, np.float64):
            pf, pb = bench(_kernels_py, shape, dtype, args.repeat)
            if _kernels is not None:
                cf, cb = bench(_kernels, shape, dtype, args.repeat)
                sp = f"{(pf + pb) / (cf + cb):8.2f}x"
            else:
                cf = cb = float("nan")
                sp = "     n/a"
            print(f"{str(shape):<22}{np.dtype(dtype).name:<9}{pf * 1e3:>9.2f}ms{cf * 1e3:>10.2f}ms"
                  f"{pb * 1e3:>9.2f}ms{cb * 1e3:>10.2f}ms{sp}")
    print("\nseconds per training epoch (8 pairs x 4096 samples, compact model):")
    for pure in ("0", "1"):
        env = dict(os.environ, AMPAL_PURE_PYTHON=pure)
        out = subprocess.run([sys.executable, "-c", EPOCH_SNIPPET], env=env, capture_output=True, text=True)
        print("  " + (out.stdout.strip() or out.stderr.strip().splitlines()[-1]))


if __name__ == "__main__":
    main()
