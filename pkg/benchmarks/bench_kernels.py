"""Time the compiled and numpy kernel backends on representative sizes.

Usage: python3 benchmarks/bench_kernels.py [--repeat N]
"""

import argparse
import timeit

import numpy as np

from san import _fallback

try:
    from san import _core
except ImportError:
    _core = None

SIGMAS = np.array([2.0, 5.0, 10.0, 20.0, 40.0, 80.0])
ETAS = np.ones(6)


def cases(rng):
    x, y = rng.normal(size=(50, 32)), rng.normal(size=(50, 32))
    big_x, big_y = rng.normal(size=(50, 2048)), rng.normal(size=(50, 2048))
    queries, gallery = rng.normal(size=(150, 2)), rng.normal(size=(300, 2))
    q_labels, g_labels = rng.integers(0, 6, 150), rng.integers(0, 6, 300)
    g_ids = np.arange(1, 301, dtype=np.uint64)
    dists = rng.random(10_000)
    ids = rng.permutation(10_000).astype(np.uint64)
    return {
        "mmd 50x32": lambda m: m.mmd_and_grad(x, y, SIGMAS, ETAS),
        "mmd 50x2048": lambda m: m.mmd_and_grad(big_x, big_y, SIGMAS, ETAS),
        "topk 150q x 300g, K=20": lambda m: m.topk_metrics(queries, q_labels, gallery, g_labels,
                                                            g_ids, 20),
        "rank 10k": lambda m: m.rank_order(dists, ids),
    }


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args()
    backends = [("python", _fallback)] + ([("compiled", _core)] if _core else [])
    print(f"{'case':26s}" + "".join(f"{name:>14s}" for name, _ in backends)
          + ("   speedup" if _core else ""))
    for label, fn in cases(np.random.default_rng(0)).items():
        times = []
        for _, module in backends:
            number = 20
            best = min(timeit.repeat(lambda: fn(module), number=number, repeat=args.repeat))
            times.append(best / number)
        row = f"{label:26s}" + "".join(f"{t * 1e3:12.3f}ms" for t in times)
        if _core:
            row += f"   {times[0] / times[1]:6.2f}x"
        print(row)


if __name__ == "__main__":
    main()
