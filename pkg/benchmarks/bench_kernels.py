"""Compare the compiled and numpy Philox backends.

    python3 benchmarks/bench_kernels.py [--rows 2000] [--cols 1000] [--repeat 5]

Prints throughput of the raw block function and of normal draws, and checks
that both backends return identical words.
"""

import argparse
import timeit

import numpy as np

from ungd import rng


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--rows", type=int, default=2000)
    ap.add_argument("--cols", type=int, default=1000)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()

    backends = ["python"]
    try:
        rng.backend_module("cython")
        backends.insert(0, "cython")
    except ImportError:
        print("compiled backend not built; timing the numpy fallback only")

    n = args.rows * args.cols
    results = {}
    for name in backends:
        impl = rng.backend_module(name)
        rows = np.arange(args.rows, dtype=np.uint32)
        words = lambda: impl.keyed_words(123, int(rng.Stream.WEIGHTS), 1, rows, args.cols)
        draws = lambda: rng.normals(123, rng.Stream.WEIGHTS, 1, args.rows, args.cols, backend=name)
        t_words = min(timeit.repeat(words, number=1, repeat=args.repeat))
        t_draws = min(timeit.repeat(draws, number=1, repeat=args.repeat))
        results[name] = words()
        print(
            f"{name:>7}: philox {n / t_words / 1e6:8.1f} M blocks/s   "
            f"normals {n / t_draws / 1e6:8.1f} M/s   ({t_words * 1e3:.1f} ms, {t_draws * 1e3:.1f} ms)"
        )
    if len(results) == 2:
        same = all(np.array_equal(a, b) for a, b in zip(results["cython"], results["python"]))
        print(f"backends bit-identical: {same}")


if __name__ == "__main__":
    main()
