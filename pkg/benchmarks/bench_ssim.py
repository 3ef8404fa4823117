"""Compare the compiled and NumPy SSIM backends on one evaluation class.

Usage: python benchmarks/bench_ssim.py [--images 10] [--size 32] [--repeat 5]
"""

import argparse
import timeit

import numpy as np

from fadiff import ssim as ssim_mod
from fadiff.ssim import DEFAULT_PARAMS, pairwise_ssim


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--images", type=int, default=10, help="images per class")
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--repeat", type=int, default=5)
    args = p.parse_args()

    stack = np.random.default_rng(0).random((args.images, args.size, args.size))
    n_pairs = args.images * (args.images - 1) // 2
    backends = ["numpy"] + (["cython"] if ssim_mod._ssim_core is not None else [])
    results = {}
    for backend in backends:
        pairwise_ssim(stack, DEFAULT_PARAMS, backend)
        t = min(timeit.repeat(lambda: pairwise_ssim(stack, DEFAULT_PARAMS, backend),
                              number=1, repeat=args.repeat))
        results[backend] = t
        print(f"{backend:7s} {t * 1e3:9.2f} ms  ({n_pairs} pairs, {t / n_pairs * 1e6:.1f} us/pair)")
    if len(results) == 2:
        diff = np.abs(pairwise_ssim(stack, DEFAULT_PARAMS, "cython")
                      - pairwise_ssim(stack, DEFAULT_PARAMS, "numpy")).max()
        print(f"speed-up {results['numpy'] / results['cython']:.1f}x, max |difference| {diff:.2e}")
    else:
        print("compiled core not available; reinstall without FADIFF_PURE_PYTHON to compare")


if __name__ == "__main__":
    main()
