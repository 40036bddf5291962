# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled versions of the hot loops in ``_pykernels``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt
from libc.stdlib cimport malloc, free

cnp.import_array()


def levenshtein(str a, str b, int max_dist=-1):
    cdef Py_ssize_t la, lb, i, j
    cdef Py_ssize_t *prev
    cdef Py_ssize_t *cur
    cdef Py_ssize_t *tmp
    cdef Py_ssize_t best, v, result
    cdef Py_UCS4 ca
    if a == b:
        return 0
    if len(a) < len(b):
        a, b = b, a
    la = len(a)
    lb = len(b)
    if max_dist >= 0 and la - lb > max_dist:
        return max_dist + 1
    prev = <Py_ssize_t *> malloc((lb + 1) * sizeof(Py_ssize_t))
    cur = <Py_ssize_t *> malloc((lb + 1) * sizeof(Py_ssize_t))
    if prev == NULL or cur == NULL:
        free(prev)
        free(cur)
        raise MemoryError()
    try:
        for j in range(lb + 1):
            prev[j] = j
        for i in range(1, la + 1):
            ca = a[i - 1]
            cur[0] = i
            best = i
            for j in range(1, lb + 1):
                v = prev[j - 1] + (0 if ca == b[j - 1] else 1)
                if prev[j] + 1 < v:
                    v = prev[j] + 1
                if cur[j - 1] + 1 < v:
                    v = cur[j - 1] + 1
                cur[j] = v
                if v < best:
                    best = v
            if max_dist >= 0 and best > max_dist:
                return max_dist + 1
            tmp = prev
            prev = cur
            cur = tmp
        result = prev[lb]
        return result
    finally:
        free(prev)
        free(cur)


def euclidean_distances(matrix, query):
    cdef cnp.ndarray[cnp.float64_t, ndim=2] m = np.ascontiguousarray(matrix, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] q = np.ascontiguousarray(query, dtype=np.float64)
    if m.ndim != 2 or q.ndim != 1 or m.shape[1] != q.shape[0]:
        raise ValueError(
            f"shape mismatch: matrix {np.shape(matrix)} vs query {np.shape(query)}"
        )
    cdef Py_ssize_t rows = m.shape[0], dim = m.shape[1], i, j
    cdef cnp.ndarray[cnp.float64_t, ndim=1] out = np.empty(rows, dtype=np.float64)
    cdef double acc, d
    for i in range(rows):
        acc = 0.0
        for j in range(dim):
            d = m[i, j] - q[j]
            acc += d * d
        out[i] = sqrt(acc)
    return out


def count_ngrams(corpus, int n):
    cdef dict counts = {}
    cdef list tokens
    cdef Py_ssize_t i, size
    cdef tuple gram
    for seq in corpus:
        tokens = list(seq)
        size = len(tokens)
        for i in range(size - n + 1):
            gram = tuple(tokens[i:i + n])
            counts[gram] = counts.get(gram, 0) + 1
    return counts
