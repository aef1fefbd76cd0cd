"""Time the compiled lightness-order kernel against the NumPy fallback.

    python3 benchmarks/bench_kernels.py [--sizes 400 1600 2500] [--repeat 5]

2500 samples is the full 50x50 LOE grid.
"""
import argparse
import timeit

import numpy as np

from ultrabm import _kernels_py, kernels


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--sizes", type=int, nargs="+", default=[400, 1600, 2500])
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args()

    rng = np.random.default_rng(0)
    print(f"dispatch backend: {kernels.BACKEND}")
    print(f"{'n':>6} {'numpy ms':>10} {'dispatch ms':>12} {'speedup':>8}")
    for n in args.sizes:
        a, b = rng.random(n), rng.random(n)
        assert kernels.order_mismatch_count(a, b) == _kernels_py.order_mismatch_count(a, b)
        t_py = min(timeit.repeat(lambda: _kernels_py.order_mismatch_count(a, b), number=1, repeat=args.repeat))
        t_fast = min(timeit.repeat(lambda: kernels.order_mismatch_count(a, b), number=1, repeat=args.repeat))
        print(f"{n:>6} {1e3 * t_py:>10.2f} {1e3 * t_fast:>12.2f} {t_py / t_fast:>8.1f}x")


if __name__ == "__main__":
    main()
