"""Hot inner loops, each with a numba path and a pure-numpy path.

The numba path is used when numba imports cleanly and the environment
variable ``SUPTLAB_DISABLE_NUMBA`` is unset (or ``0``).  Both paths are
always importable through :data:`numpy_impl` and :data:`numba_impl` so the
benchmark and the tests can compare them directly.
"""

from __future__ import annotations

import math
import os
from types import SimpleNamespace

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

_flag = os.environ.get("SUPTLAB_DISABLE_NUMBA", "0").strip().lower()
USE_NUMBA = HAVE_NUMBA and _flag in ("", "0", "false", "no")


def select_count(ratio: float, n: int) -> int:
    """Number of nodes kept by top-rank selection, ``ceil(ratio * n)``.

    A 1e-9 slack absorbs representation error (0.6 * 5 == 3.0000000000000004).
    """
    count = int(math.ceil(ratio * n - 1e-9))
    return min(max(count, 1), n)


# ---------------------------------------------------------------- numpy path


def _propagate_np(x, src, dst, w_edge, w_self):
    out = w_self[:, None] * x
    if src.size:
        np.add.at(out, src, w_edge[:, None] * x[dst])
        np.add.at(out, dst, w_edge[:, None] * x[src])
    return out


def _segment_sum_np(x, ptr):
    return np.add.reduceat(x, ptr[:-1], axis=0)


def _segment_topk_mask_np(alpha, ptr, ratio):
    n_total, k = alpha.shape
    mask = np.zeros((n_total, k), dtype=np.bool_)
    for g in range(ptr.size - 1):
        lo, hi = ptr[g], ptr[g + 1]
        count = select_count(ratio, hi - lo)
        for j in range(k):
            # stable sort on the negated column: ties resolve to the smaller index
            order = np.argsort(-alpha[lo:hi, j], kind="stable")
            mask[lo + order[:count], j] = True
    return mask


def _tied_ranks_np(x):
    order = np.argsort(x, kind="stable")
    sorted_x = x[order]
    ranks = np.empty(x.size, dtype=np.float64)
    # boundaries of runs of equal values
    starts = np.flatnonzero(np.r_[True, sorted_x[1:] != sorted_x[:-1]])
    ends = np.r_[starts[1:], x.size]
    avg = (starts + ends + 1) / 2.0
    ranks[order] = np.repeat(avg, ends - starts)
    return ranks


numpy_impl = SimpleNamespace(
    name="numpy",
    propagate=_propagate_np,
    segment_sum=_segment_sum_np,
    segment_topk_mask=_segment_topk_mask_np,
    tied_ranks=_tied_ranks_np,
)


# ---------------------------------------------------------------- numba path

if HAVE_NUMBA:

    @njit(cache=True)
    def _propagate_nb(x, src, dst, w_edge, w_self):
        n, c = x.shape
        out = np.empty((n, c))
        for i in range(n):
            s = w_self[i]
            for j in range(c):
                out[i, j] = s * x[i, j]
        for e in range(src.size):
            u = src[e]
            v = dst[e]
            w = w_edge[e]
            for j in range(c):
                out[u, j] += w * x[v, j]
                out[v, j] += w * x[u, j]
        return out

    @njit(cache=True)
    def _segment_sum_nb(x, ptr):
        g_count = ptr.size - 1
        c = x.shape[1]
        out = np.zeros((g_count, c))
        for g in range(g_count):
            for i in range(ptr[g], ptr[g + 1]):
                for j in range(c):
                    out[g, j] += x[i, j]
        return out

    @njit(cache=True)
    def _segment_topk_mask_nb(alpha, ptr, ratio):
        n_total, k = alpha.shape
        mask = np.zeros((n_total, k), dtype=np.bool_)
        for g in range(ptr.size - 1):
            lo = ptr[g]
            hi = ptr[g + 1]
            n = hi - lo
            count = int(math.ceil(ratio * n - 1e-9))
            if count < 1:
                count = 1
            if count > n:
                count = n
            for j in range(k):
                order = np.argsort(-alpha[lo:hi, j], kind="mergesort")
                for t in range(count):
                    mask[lo + order[t], j] = True
        return mask

    @njit(cache=True)
    def _tied_ranks_nb(x):
        n = x.size
        order = np.argsort(x, kind="mergesort")
        ranks = np.empty(n)
        i = 0
        while i < n:
            j = i
            while j + 1 < n and x[order[j + 1]] == x[order[i]]:
                j += 1
            avg = (i + j + 2) / 2.0
            for t in range(i, j + 1):
                ranks[order[t]] = avg
            i = j + 1
        return ranks

    numba_impl = SimpleNamespace(
        name="numba",
        propagate=_propagate_nb,
        segment_sum=_segment_sum_nb,
        segment_topk_mask=_segment_topk_mask_nb,
        tied_ranks=_tied_ranks_nb,
    )
else:  # pragma: no cover
    numba_impl = None

active = numba_impl if USE_NUMBA else numpy_impl

propagate = active.propagate
segment_sum = active.segment_sum
segment_topk_mask = active.segment_topk_mask
tied_ranks = active.tied_ranks
