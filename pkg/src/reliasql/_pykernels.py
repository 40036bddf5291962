"""Pure-Python implementations of the hot loops.

Signatures mirror ``_ckernels.pyx`` exactly; ``reliasql.kernels`` picks one.
"""

from __future__ import annotations

from collections import Counter
from typing import Sequence

import numpy as np


def levenshtein(a: str, b: str, max_dist: int = -1) -> int:
    """Edit distance with unit costs.

    With ``max_dist >= 0`` the result is capped at ``max_dist + 1`` as soon as
    every cell in a row exceeds the bound.
    """
    if a == b:
        return 0
    if len(a) < len(b):
        a, b = b, a
    if max_dist >= 0 and len(a) - len(b) > max_dist:
        return max_dist + 1
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        for j, cb in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        if max_dist >= 0 and min(cur) > max_dist:
            return max_dist + 1
        prev = cur
    return prev[-1]


def euclidean_distances(matrix: np.ndarray, query: np.ndarray) -> np.ndarray:
    matrix = np.ascontiguousarray(matrix, dtype=np.float64)
    query = np.ascontiguousarray(query, dtype=np.float64)
    if matrix.ndim != 2 or query.ndim != 1 or matrix.shape[1] != query.shape[0]:
        raise ValueError(
            f"shape mismatch: matrix {matrix.shape} vs query {query.shape}"
        )
    diff = matrix - query
    return np.sqrt(np.einsum("ij,ij->i", diff, diff))


def count_ngrams(corpus: Sequence[Sequence[str]], n: int) -> dict[tuple[str, ...], int]:
    counts: Counter[tuple[str, ...]] = Counter()
    for tokens in corpus:
        tokens = list(tokens)
        counts.update(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))
    return dict(counts)
