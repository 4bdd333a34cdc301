"""Exact k-nearest-neighbor search.

Two interchangeable engines share one distance kernel and one ordering
rule (squared distance, then point index), so they return bit-identical
results:

* a blocked brute-force scan, which works for any storage and any k;
* a vantage-point tree for dense, low-dimensional data, where metric
  pruning beats the quadratic scan.

Exactness is the contract here; the tree is only an accelerator.
"""

from __future__ import annotations

import numpy as np
from numba import njit

from .core import DataSet, sq_distances
from .errors import KTooLarge

# routing thresholds for the tree path
_VP_MIN_N = 1024
_VP_MAX_DIM = 64


# ---------------------------------------------------------------------------
# brute force
# ---------------------------------------------------------------------------

def knn_from_d2(d2_full: np.ndarray, k: int):
    """Select neighbors from a precomputed squared-distance matrix.

    Applies exactly the ordering rule of the scanning engines, so if
    d2_full came from DataSet.sq_distance_matrix() the result is
    bit-identical to running exact_knn on the data itself.
    """
    n = d2_full.shape[0]
    if d2_full.shape != (n, n):
        raise KTooLarge("distance matrix must be square")
    if k < 1 or k >= n:
        raise KTooLarge(f"k={k} out of range for n={n} (need 1 <= k <= n-1)")
    ids = np.empty((n, k), dtype=np.int64)
    d2 = np.empty((n, k), dtype=np.float64)
    order = np.argsort(d2_full, axis=1, kind="stable")
    for i in range(n):
        row = order[i]
        row = row[row != i][:k]
        ids[i] = row
        d2[i] = d2_full[i, row]
    return ids, d2


def _knn_brute(data: DataSet, k: int):
    n = data.n
    ids = np.empty((n, k), dtype=np.int64)
    d2 = np.empty((n, k), dtype=np.float64)
    # keep each distance block around 16M doubles
    rows_per_block = max(1, (1 << 24) // max(n, 1))
    for lo in range(0, n, rows_per_block):
        hi = min(lo + rows_per_block, n)
        block = data.row_block(lo, hi)
        dists = np.empty((hi - lo, n), dtype=np.float64)
        for lo2 in range(0, n, 2048):
            hi2 = min(lo2 + 2048, n)
            dists[:, lo2:hi2] = sq_distances(block, data.row_block(lo2, hi2))
        order = np.argsort(dists, axis=1, kind="stable")
        for r in range(hi - lo):
            i = lo + r
            row = order[r]
            row = row[row != i][:k]
            ids[i] = row
            d2[i] = dists[r, row]
    return ids, d2


# ---------------------------------------------------------------------------
# vantage-point tree
# ---------------------------------------------------------------------------

@njit(cache=True, nogil=True)
def _row_sqdist(x, i, j):
    s = 0.0
    for t in range(x.shape[1]):
        d = x[i, t] - x[j, t]
        s += d * d
    return s


@njit(cache=True, nogil=True)
def _vp_build(x):
    """Array-encoded vantage-point tree over the rows of x.

    Each node consumes the segment's smallest point index as its vantage
    and splits the rest at the median distance, ties broken by index, so
    the structure is a pure function of the data.
    """
    n = x.shape[0]
    vantage = np.full(n, -1, dtype=np.int64)
    radius = np.zeros(n, dtype=np.float64)
    left = np.full(n, -1, dtype=np.int64)
    right = np.full(n, -1, dtype=np.int64)

    idx = np.arange(n)
    dist = np.empty(n, dtype=np.float64)
    # stack rows: lo, hi, parent slot, side (0 left / 1 right)
    stack = np.empty((2 * n + 8, 4), dtype=np.int64)
    sp = 0
    stack[sp, 0] = 0
    stack[sp, 1] = n
    stack[sp, 2] = -1
    stack[sp, 3] = 0
    sp += 1
    next_slot = 0
    while sp > 0:
        sp -= 1
        lo = stack[sp, 0]
        hi = stack[sp, 1]
        parent = stack[sp, 2]
        side = stack[sp, 3]
        if hi <= lo:
            continue
        slot = next_slot
        next_slot += 1
        if parent >= 0:
            if side == 0:
                left[parent] = slot
            else:
                right[parent] = slot
        # vantage: smallest point index in the segment, for determinism
        vpos = lo
        for t in range(lo + 1, hi):
            if idx[t] < idx[vpos]:
                vpos = t
        tmp = idx[lo]
        idx[lo] = idx[vpos]
        idx[vpos] = tmp
        v = idx[lo]
        vantage[slot] = v
        rest = hi - lo - 1
        if rest == 0:
            continue
        for t in range(lo + 1, hi):
            dist[t] = _row_sqdist(x, v, idx[t])
        # sort segment (lo+1:hi) by (distance, index)
        seg = np.empty(rest, dtype=np.int64)
        segd = np.empty(rest, dtype=np.float64)
        for t in range(rest):
            seg[t] = idx[lo + 1 + t]
            segd[t] = dist[lo + 1 + t]
        order = np.argsort(segd, kind="mergesort")
        # group ties by index (mergesort is stable, idx may be unordered)
        t = 0
        while t < rest:
            u = t + 1
            while u < rest and segd[order[u]] == segd[order[t]]:
                u += 1
            if u - t > 1:
                sub = np.empty(u - t, dtype=np.int64)
                for w in range(t, u):
                    sub[w - t] = seg[order[w]]
                sub.sort()
                for w in range(t, u):
                    idx[lo + 1 + w] = sub[w - t]
                    dist[lo + 1 + w] = segd[order[t]]
            else:
                idx[lo + 1 + t] = seg[order[t]]
                dist[lo + 1 + t] = segd[order[t]]
            t = u
        half = (rest + 1) // 2
        radius[slot] = dist[lo + half]  # largest inner distance
        # push right then left so the left segment is processed first
        stack[sp, 0] = lo + 1 + half
        stack[sp, 1] = hi
        stack[sp, 2] = slot
        stack[sp, 3] = 1
        sp += 1
        stack[sp, 0] = lo + 1
        stack[sp, 1] = lo + 1 + half
        stack[sp, 2] = slot
        stack[sp, 3] = 0
        sp += 1
    return vantage, radius, left, right


@njit(cache=True, nogil=True)
def _heap_push(hd, hi_, size, d, i):
    """Push (d, i) onto a (distance, index) max-heap stored in arrays."""
    pos = size
    hd[pos] = d
    hi_[pos] = i
    while pos > 0:
        par = (pos - 1) // 2
        if hd[par] > hd[pos] or (hd[par] == hd[pos] and hi_[par] > hi_[pos]):
            break
        hd[par], hd[pos] = hd[pos], hd[par]
        hi_[par], hi_[pos] = hi_[pos], hi_[par]
        pos = par
    return size + 1


@njit(cache=True, nogil=True)
def _heap_replace_top(hd, hi_, size, d, i):
    hd[0] = d
    hi_[0] = i
    pos = 0
    while True:
        l = 2 * pos + 1
        r = l + 1
        big = pos
        if l < size and (
            hd[l] > hd[big] or (hd[l] == hd[big] and hi_[l] > hi_[big])
        ):
            big = l
        if r < size and (
            hd[r] > hd[big] or (hd[r] == hd[big] and hi_[r] > hi_[big])
        ):
            big = r
        if big == pos:
            break
        hd[pos], hd[big] = hd[big], hd[pos]
        hi_[pos], hi_[big] = hi_[big], hi_[pos]
        pos = big


@njit(cache=True, nogil=True)
def _vp_query_all(x, vantage, radius, left, right, k, out_ids, out_d2):
    n = x.shape[0]
    # accumulated-rounding allowance, proportional to feature count: a
    # squared distance is a sum of x.shape[1] rounded terms
    slack_factor = (x.shape[1] + 16) * 1e-14
    hd = np.empty(k, dtype=np.float64)
    hid = np.empty(k, dtype=np.int64)
    stack = np.empty(256, dtype=np.int64)
    for q in range(n):
        size = 0
        sp = 0
        stack[sp] = 0
        sp += 1
        while sp > 0:
            sp -= 1
            node = stack[sp]
            if node < 0:
                continue
            v = vantage[node]
            dv = _row_sqdist(x, q, v)
            if v != q:
                if size < k:
                    size = _heap_push(hd, hid, size, dv, v)
                elif dv < hd[0] or (dv == hd[0] and v < hid[0]):
                    _heap_replace_top(hd, hid, size, dv, v)
            if left[node] < 0 and right[node] < 0:
                continue
            worst = np.inf if size < k else hd[0]
            s = np.sqrt(dv)
            t = np.sqrt(radius[node])
            gap = s - t
            # The geometric bound goes through square roots while the heap
            # holds raw squared sums, and the two rounding paths can
            # disagree by a few ulp, so pruning needs slack scaled to the
            # magnitudes involved or a boundary neighbor can be missed.
            bound = worst + slack_factor * (dv + radius[node] + worst)
            # near child first; prune the far child only when every point
            # in it must be worse than the current k-th best by more than
            # the rounding slack
            if dv <= radius[node]:
                if right[node] >= 0 and gap * gap <= bound:
                    stack[sp] = right[node]
                    sp += 1
                if left[node] >= 0:
                    stack[sp] = left[node]
                    sp += 1
            else:
                if left[node] >= 0 and gap * gap <= bound:
                    stack[sp] = left[node]
                    sp += 1
                if right[node] >= 0:
                    stack[sp] = right[node]
                    sp += 1
        # heap-sort ascending by (distance, index)
        for pos in range(size - 1, 0, -1):
            hd[0], hd[pos] = hd[pos], hd[0]
            hid[0], hid[pos] = hid[pos], hid[0]
            # sift down within [0, pos)
            cur = 0
            while True:
                l = 2 * cur + 1
                r = l + 1
                big = cur
                if l < pos and (
                    hd[l] > hd[big] or (hd[l] == hd[big] and hid[l] > hid[big])
                ):
                    big = l
                if r < pos and (
                    hd[r] > hd[big] or (hd[r] == hd[big] and hid[r] > hid[big])
                ):
                    big = r
                if big == cur:
                    break
                hd[cur], hd[big] = hd[big], hd[cur]
                hid[cur], hid[big] = hid[big], hid[cur]
                cur = big
        for t2 in range(k):
            out_ids[q, t2] = hid[t2]
            out_d2[q, t2] = hd[t2]


def _knn_vptree(data: DataSet, k: int):
    x = data.row_block(0, data.n)
    vantage, radius, left, right = _vp_build(x)
    ids = np.empty((data.n, k), dtype=np.int64)
    d2 = np.empty((data.n, k), dtype=np.float64)
    _vp_query_all(x, vantage, radius, left, right, k, ids, d2)
    return ids, d2


# ---------------------------------------------------------------------------
# public entry point
# ---------------------------------------------------------------------------

def exact_knn(data: DataSet, k: int, engine: str = "auto"):
    """k nearest neighbors of every point, self excluded, exact.

    Neighbors are ordered by (squared distance, point index) ascending;
    the index tie-break keeps results deterministic for duplicate or
    equidistant points.  Returns (ids, d2), both of shape (n, k).

    engine is "auto", "brute" or "vptree"; every engine returns the
    same bits, "auto" just picks the faster one.
    """
    n = data.n
    if k < 1 or k >= n:
        raise KTooLarge(f"k={k} out of range for n={n} (need 1 <= k <= n-1)")
    if engine == "auto":
        use_tree = (
            not data.is_sparse
            and n >= _VP_MIN_N
            and data.m <= _VP_MAX_DIM
            and k <= n // 4
        )
        engine = "vptree" if use_tree else "brute"
    if engine == "vptree":
        return _knn_vptree(data, k)
    if engine == "brute":
        return _knn_brute(data, k)
    raise ValueError(f"unknown knn engine {engine!r}")
