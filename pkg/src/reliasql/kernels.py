"""Hot-loop kernels, compiled when available.

Set ``RELIASQL_PURE_PYTHON=1`` to force the pure-Python implementations.
"""

import os


def _load():
    if os.environ.get("RELIASQL_PURE_PYTHON") != "1":
        try:
            from reliasql import _ckernels

            return "cython", _ckernels
        except ImportError:
            pass
    from reliasql import _pykernels

    return "python", _pykernels


BACKEND, _impl = _load()
levenshtein = _impl.levenshtein
euclidean_distances = _impl.euclidean_distances
count_ngrams = _impl.count_ngrams

__all__ = ["BACKEND", "count_ngrams", "euclidean_distances", "levenshtein"]
