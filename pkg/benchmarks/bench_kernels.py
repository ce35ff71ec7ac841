"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 5]

Prints one row per kernel with the best-of-``repeat`` wall time of each
backend and their ratio, then the same for a full SEU-Net forward/backward
pass (run in subprocesses so each backend is selected at import).
"""
import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from seunet import _pykernels

try:
    from seunet import _ckernels
except ImportError:  # extension not built
    _ckernels = None


def kernel_cases(rng):
    x = rng.normal(size=(8, 48, 48, 16)).astype(np.float32)
    cols = rng.normal(size=(8, 48, 48, 3, 3, 16)).astype(np.float32)
    span = np.arange(-2, 3)
    offs = np.stack(np.meshgrid(span, span, indexing="ij"), -1).reshape(-1, 2)
    pens = ((offs**2).sum(1) / 4.0).astype(np.float32)
    _, idx = _pykernels.window_argmax(x, offs, pens)
    return {
        "im2col 3x3 d2": lambda k: k.im2col(x, 3, 3, 2, 2, 1, 2, 2, 48, 48),
        "col2im 3x3 d2": lambda k: k.col2im(cols, 48, 48, 2, 2, 1, 2, 2),
        "window_argmax 5x5": lambda k: k.window_argmax(x, offs, pens),
        "window_scatter 5x5": lambda k: k.window_scatter(x, idx, offs),
    }


MODEL_SNIPPET = """
import time, numpy as np
from seunet.models import ModelConfig, build_seunet, forward
from seunet.rng import make_rng
from seunet.tensor import backward
from seunet.training import cross_entropy_loss
m = build_seunet(ModelConfig(height=3, filters=8, num_scales=4, pooling="{pooling}"), make_rng(0))
x = np.random.default_rng(0).random((8, 96, 96, 1)).astype(np.float32)
y = np.zeros((8, 96, 96), np.int64)
best = 1e9
for _ in range({repeat}):
    t = time.perf_counter()
    backward(cross_entropy_loss(forward(m, x, training=True), y))
    best = min(best, time.perf_counter() - t)
print(best)
"""


def model_time(pure: bool, pooling: str, repeat: int) -> float:
    env = dict(os.environ, SEUNET_PURE_PYTHON="1" if pure else "0")
    code = MODEL_SNIPPET.format(pooling=pooling, repeat=repeat)
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    return float(out.stdout.strip())


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--skip-model", action="store_true")
    a = ap.parse_args()
    if _ckernels is None:
        sys.exit("compiled extension not built; run `pip install -e . --no-build-isolation` first")
    print(f"{'case':<34}{'cython s':>10}{'python s':>10}{'ratio':>8}")
    for name, fn in kernel_cases(np.random.default_rng(0)).items():
        tc = min(timeit.repeat(lambda: fn(_ckernels), number=1, repeat=a.repeat))
        tp = min(timeit.repeat(lambda: fn(_pykernels), number=1, repeat=a.repeat))
        print(f"{name:<34}{tc:>10.4f}{tp:>10.4f}{tp / tc:>8.2f}")
    if not a.skip_model:
        for pooling in ("stride", "maxscale"):
            tc = model_time(False, pooling, max(1, a.repeat // 2))
            tp = model_time(True, pooling, max(1, a.repeat // 2))
            print(f"{'seunet fwd+bwd 8x96x96 ' + pooling:<34}{tc:>10.4f}{tp:>10.4f}{tp / tc:>8.2f}")


if __name__ == "__main__":
    main()
