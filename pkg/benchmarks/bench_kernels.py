"""Compare the compiled kernels with the pure-Python fallbacks.

    python3 benchmarks/bench_kernels.py [--repeat 5]
"""

from __future__ import annotations

import argparse
import random
import timeit

import numpy as np

from reliasql import _pykernels

try:
    from reliasql import _ckernels
except ImportError:
    _ckernels = None


def workloads(seed: int = 0):
    rng = random.Random(seed)
    alphabet = "abcdefghijklmnopqrstuvwxyz_"
    names = ["".join(rng.choice(alphabet) for _ in range(rng.randint(4, 20))) for _ in range(400)]
    pairs = list(zip(names[::2], names[1::2]))
    np_rng = np.random.default_rng(seed)
    matrix = np_rng.normal(size=(5000, 512))
    query = np_rng.normal(size=512)
    vocab = [f"w{i}" for i in range(300)]
    corpus = [[rng.choice(vocab) for _ in range(rng.randint(5, 20))] for _ in range(5000)]
    return {
        "levenshtein x200": lambda impl: [impl.levenshtein(a, b) for a, b in pairs],
        "levenshtein bounded x200": lambda impl: [impl.levenshtein(a, b, 2) for a, b in pairs],
        "euclidean 5000x512": lambda impl: impl.euclidean_distances(matrix, query),
        "trigrams 5000 questions": lambda impl: impl.count_ngrams(corpus, 3),
    }


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args()
    impls = {"python": _pykernels}
    if _ckernels is not None:
        impls["cython"] = _ckernels
    else:
        print("compiled kernels not built; timing the Python versions only")

    print(f"{'workload':28s}" + "".join(f"{name:>12s}" for name in impls) + ("     speedup" if len(impls) > 1 else ""))
    for label, job in workloads().items():
        best = {}
        for name, impl in impls.items():
            best[name] = min(timeit.repeat(lambda: job(impl), number=1, repeat=args.repeat))
        row = f"{label:28s}" + "".join(f"{best[n] * 1e3:10.2f}ms" for n in impls)
        if "cython" in best:
            row += f"{best['python'] / best['cython']:11.1f}x"
        print(row)


if __name__ == "__main__":
    main()
