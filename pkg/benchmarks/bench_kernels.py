"""Time the numba kernels against their numpy twins.

    python benchmarks/bench_kernels.py [--cutoff 130] [--repeat 3]

Reports best-of-N wall time per kernel and the largest absolute difference
between the two backends' outputs.
"""

import argparse
import time

import numpy as np

from qbilliard import kernels
from qbilliard.spectral_core import basis_pairs


def best_of(fn, args, repeat):
    out, best = None, float("inf")
    for _ in range(repeat):
        t = time.perf_counter()
        out = fn(*args)
        best = min(best, time.perf_counter() - t)
    return best, out


def _diff(a, b):
    if isinstance(a, tuple):
        return max(_diff(x, y) for x, y in zip(a, b))
    return float(np.max(np.abs(np.asarray(a, float) - np.asarray(b, float))))


def cases(cutoff):
    rng = np.random.default_rng(0)
    big, small = basis_pairs(cutoff, 1)
    x = rng.random((32, 32, 32, 16)).astype(np.float32)
    cols = rng.random((32, 32, 32, 144)).astype(np.float32)
    pooled, arg = kernels.NUMPY_KERNELS["maxpool"](x)
    grad = rng.random(pooled.shape).astype(np.float32)
    return {
        "coupling": (big, small, 0.2),
        "im2col": (x, 3, 1),
        "col2im": (cols, 32, 32, 16, 3, 1),
        "maxpool": (x,),
        "maxpool_back": (grad, arg, 32, 32),
    }


def main(argv=None):
    ap = argparse.ArgumentParser()
    ap.add_argument("--cutoff", type=int, default=130)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args(argv)
    if kernels.NUMBA_KERNELS is None:
        print("numba not installed; only the numpy backend is available")
    print(f"{'kernel':<14}{'numpy [s]':>12}{'numba [s]':>12}{'speedup':>10}{'max |diff|':>14}")
    for name, call in cases(args.cutoff).items():
        t_np, out_np = best_of(kernels.NUMPY_KERNELS[name], call, args.repeat)
        if kernels.NUMBA_KERNELS is None:
            print(f"{name:<14}{t_np:12.4f}")
            continue
        kernels.NUMBA_KERNELS[name](*call)  # compile outside the timing
        t_nb, out_nb = best_of(kernels.NUMBA_KERNELS[name], call, args.repeat)
        print(f"{name:<14}{t_np:12.4f}{t_nb:12.4f}{t_np / t_nb:10.1f}{_diff(out_np, out_nb):14.3g}")


if __name__ == "__main__":
    main()
