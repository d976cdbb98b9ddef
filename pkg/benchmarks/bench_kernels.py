"""Compiled vs pure-Python kernels.

    python benchmarks/bench_kernels.py [--repeat N]
"""
import argparse
import timeit

import numpy as np

from findkit import kernels


def cases(rng):
    cost = rng.random((64, 64))
    mask = rng.random(64 * 64) < 0.3
    counts = kernels.pure.rle_encode(mask)
    a = rng.integers(-1, 20, size=64 * 64)
    b = rng.integers(0, 20, size=64 * 64)
    return {
        "linear_sum_assignment 64x64": lambda k: k.linear_sum_assignment(cost),
        "rle_encode 4096": lambda k: k.rle_encode(mask),
        "rle_decode 4096": lambda k: k.rle_decode(counts, mask.size),
        "label_contingency 4096": lambda k: k.label_contingency(a, b, 20, 20),
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    if kernels.compiled is None:
        print("compiled extension not built; only the pure backend is available")
    rng = np.random.default_rng(0)
    print(f"{'kernel':<30}{'python ms':>12}{'compiled ms':>14}{'speedup':>10}")
    for name, fn in cases(rng).items():
        tp = min(timeit.repeat(lambda: fn(kernels.pure), number=1, repeat=args.repeat)) * 1e3
        if kernels.compiled is not None:
            tc = min(timeit.repeat(lambda: fn(kernels.compiled), number=1, repeat=args.repeat)) * 1e3
            print(f"{name:<30}{tp:>12.3f}{tc:>14.3f}{tp / tc:>9.1f}x")
        else:
            print(f"{name:<30}{tp:>12.3f}{'-':>14}{'-':>10}")


if __name__ == "__main__":
    main()
