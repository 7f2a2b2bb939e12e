"""Compare the compiled kernels with the numpy fallback.

Usage::

    python3 benchmarks/bench_kernels.py [--repeat 5] [--iterations 200]

Prints per-call kernel timings at episode-sized shapes, then the wall time
of a short training run under each backend (each in a fresh interpreter,
since the backend is chosen at import).
"""
import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from proto_shift import _pykernels

try:
    from proto_shift import _ckernels
except ImportError:
    _ckernels = None

# (rows, inner, cols): encoder layers on a 5-way 1-shot episode with 15
# queries, the GCN propagation over an 85-node taxonomy, and query/prototype
# distances
CASES = {
    "matmul enc 80x32@32x64": ("matmul", (80, 32), (32, 64)),
    "matmul gcn 85x85@85x64": ("matmul", (85, 85), (85, 64)),
    "sqdist 75x32 vs 5x32": ("pairwise_sq_dist", (75, 32), (5, 32)),
    "sqdist backward 75x5": ("pairwise_sq_dist_backward", (75, 32), (5, 32)),
}

TRAIN_SCRIPT = """
import time
from proto_shift import kernels, synth, trainer
tax, data, cmap = synth.generate(synth.preset("hard-shift"))
m = trainer.build_model(tax.graph, cmap, trainer.ModelSpec())
cfg = trainer.TrainConfig(iterations={iters}, val_every={iters}, val_episodes=50)
t = time.perf_counter()
trainer.train(m, data, cfg)
print(kernels.BACKEND, time.perf_counter() - t)
"""


def _args(kind, a_shape, b_shape, rng):
    a, b = rng.normal(size=a_shape), rng.normal(size=b_shape)
    if kind == "pairwise_sq_dist_backward":
        return a, b, rng.normal(size=(a_shape[0], b_shape[0]))
    return a, b


def time_kernels(repeat):
    rng = np.random.default_rng(0)
    backends = [("python", _pykernels)] + ([("compiled", _ckernels)] if _ckernels else [])
    print(f"{'kernel':<28}" + "".join(f"{name:>14}" for name, _ in backends) + "   speedup")
    for label, (kind, a_shape, b_shape) in CASES.items():
        args = _args(kind, a_shape, b_shape, rng)
        row = []
        for _, mod in backends:
            fn = getattr(mod, kind)
            number = 200
            best = min(timeit.repeat(lambda: fn(*args), number=number, repeat=repeat)) / number
            row.append(best)
        speed = f"{row[0] / row[1]:8.1f}x" if len(row) > 1 else "       -"
        print(f"{label:<28}" + "".join(f"{t * 1e6:12.1f}us" for t in row) + "  " + speed)


def time_training(iterations):
    for backend in ("python", "compiled"):
        if backend == "compiled" and _ckernels is None:
            continue
        env = dict(os.environ, PROTO_SHIFT_KERNELS=backend)
        out = subprocess.run([sys.executable, "-c", TRAIN_SCRIPT.format(iters=iterations)],
                             env=env, capture_output=True, text=True, check=True)
        name, seconds = out.stdout.split()
        print(f"training {iterations} iterations [{name}]: {float(seconds):.2f}s")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--iterations", type=int, default=200)
    args = ap.parse_args()
    if _ckernels is None:
        print("compiled extension not built; timing the fallback only")
    time_kernels(args.repeat)
    time_training(args.iterations)


if __name__ == "__main__":
    main()
