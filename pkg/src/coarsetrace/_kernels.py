"""Backend dispatch for the hot sparse-chain kernels.

Chain traces reduce to products of block-sparse matrices over finite site
sets.  Two interchangeable implementations are provided:

* ``numba``: JIT-compiled Gustavson sparse product and paired trace,
  parallel over rows with a deterministic per-row accumulation order;
* ``numpy``: scipy.sparse fallback with identical semantics.

The backend is chosen at import time from the ``COARSETRACE_BACKEND``
environment variable (``numba`` or ``numpy``) and can be switched at runtime
with :func:`set_backend`.  Results are value-identical across backends and
thread counts within each backend (across backends they agree to
floating-point rounding); ``benchmarks/bench_trace.py`` compares speeds.
"""

from __future__ import annotations

import os

import numpy as np
import scipy.sparse as sp

try:
    import numba
    from numba import njit, prange

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    _HAVE_NUMBA = False

_env = os.environ.get("COARSETRACE_BACKEND", "numba" if _HAVE_NUMBA else "numpy").lower()
if _env not in ("numba", "numpy"):
    raise ValueError(f"COARSETRACE_BACKEND must be 'numba' or 'numpy', got {_env!r}")
_BACKEND = _env if (_env == "numpy" or _HAVE_NUMBA) else "numpy"


def set_backend(name: str) -> None:
    """Select the kernel backend ('numba' or 'numpy') at runtime."""
    global _BACKEND
    name = name.lower()
    if name == "numba" and not _HAVE_NUMBA:
        raise RuntimeError("numba is not installed")
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {name!r}")
    _BACKEND = name


def get_backend() -> str:
    return _BACKEND


def set_threads(n: int) -> None:
    """Cap the worker count of the numba backend (no-op for numpy)."""
    if _HAVE_NUMBA and n >= 1:
        numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))


if _HAVE_NUMBA:

    @njit(cache=True, parallel=True)
    def _spgemm_numba(ap, aj, ax, bp, bj, bx, n_rows, n_cols):
        nt = numba.get_num_threads()
        tags1 = np.full((nt, n_cols), -1, dtype=np.int64)
        counts = np.zeros(n_rows + 1, dtype=np.int64)
        for i in prange(n_rows):
            t = numba.get_thread_id()
            cnt = 0
            for pa in range(ap[i], ap[i + 1]):
                j = aj[pa]
                for pb in range(bp[j], bp[j + 1]):
                    c = bj[pb]
                    if tags1[t, c] != i:
                        tags1[t, c] = i
                        cnt += 1
            counts[i + 1] = cnt
        cp = np.cumsum(counts)
        nnz = cp[n_rows]
        cj = np.empty(nnz, dtype=np.int64)
        cx = np.empty(nnz, dtype=np.complex128)
        tags2 = np.full((nt, n_cols), -1, dtype=np.int64)
        sums = np.zeros((nt, n_cols), dtype=np.complex128)
        for i in prange(n_rows):
            t = numba.get_thread_id()
            touched = np.empty(cp[i + 1] - cp[i], dtype=np.int64)
            k = 0
            for pa in range(ap[i], ap[i + 1]):
                j = aj[pa]
                v = ax[pa]
                for pb in range(bp[j], bp[j + 1]):
                    c = bj[pb]
                    if tags2[t, c] != i:
                        tags2[t, c] = i
                        sums[t, c] = v * bx[pb]
                        touched[k] = c
                        k += 1
                    else:
                        sums[t, c] += v * bx[pb]
            touched = np.sort(touched[:k])
            base = cp[i]
            for m in range(k):
                cj[base + m] = touched[m]
                cx[base + m] = sums[t, touched[m]]
        return cp, cj, cx

    @njit(cache=True, parallel=True)
    def _pair_trace_numba(ap, aj, ax, bp, bj, bx, n_rows):
        out = np.zeros(n_rows, dtype=np.complex128)
        for r in prange(n_rows):
            acc = 0.0 + 0.0j
            for pa in range(ap[r], ap[r + 1]):
                c = aj[pa]
                lo = bp[c]
                hi = bp[c + 1]
                # binary search for column r in (sorted) row c of B
                while lo < hi:
                    mid = (lo + hi) // 2
                    if bj[mid] < r:
                        lo = mid + 1
                    else:
                        hi = mid
                if lo < bp[c + 1] and bj[lo] == r:
                    acc += ax[pa] * bx[lo]
            out[r] = acc
        return out


def spgemm(a: sp.csr_matrix, b: sp.csr_matrix) -> sp.csr_matrix:
    """Sparse product a @ b with deterministic accumulation order."""
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"shape mismatch {a.shape} @ {b.shape}")
    if _BACKEND == "numba" and a.nnz and b.nnz:
        cp, cj, cx = _spgemm_numba(a.indptr.astype(np.int64), a.indices.astype(np.int64),
                                   a.data.astype(np.complex128),
                                   b.indptr.astype(np.int64), b.indices.astype(np.int64),
                                   b.data.astype(np.complex128),
                                   a.shape[0], b.shape[1])
        out = sp.csr_matrix((cx, cj, cp), shape=(a.shape[0], b.shape[1]))
        out.has_sorted_indices = True
        return out
    return (a @ b).tocsr()


def pair_trace_rows(a: sp.csr_matrix, b: sp.csr_matrix) -> np.ndarray:
    """Per-row partial sums of Tr(a @ b): row r contributes sum_c a[r,c] b[c,r]."""
    if a.shape[1] != b.shape[0] or a.shape[0] != b.shape[1]:
        raise ValueError(f"shape mismatch for paired trace {a.shape} vs {b.shape}")
    if _BACKEND == "numba" and a.nnz and b.nnz:
        b = b.tocsr()
        b.sort_indices()
        a.sort_indices()
        return _pair_trace_numba(a.indptr.astype(np.int64), a.indices.astype(np.int64),
                                 a.data.astype(np.complex128),
                                 b.indptr.astype(np.int64), b.indices.astype(np.int64),
                                 b.data.astype(np.complex128), a.shape[0])
    prod = a.multiply(b.T)
    return np.asarray(prod.sum(axis=1)).ravel().astype(np.complex128)
