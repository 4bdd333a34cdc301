"""Reference oracles shared by the test modules.

Everything here is written the slow, obvious way (dense numpy, double
loops) so the package's optimized paths have something independent to
agree with.
"""

import numpy as np

from ptsne import sq_distances
from ptsne.affinity import SparseAffinity, conditional_affinity, perplexity_of


def dense_affinity(aff: SparseAffinity) -> np.ndarray:
    """Densify a SparseAffinity into a (nu, nu) matrix."""
    out = np.zeros((aff.nu, aff.nu))
    for i in range(aff.nu):
        for e in range(aff.indptr[i], aff.indptr[i + 1]):
            out[i, aff.indices[e]] = aff.vals[e]
    return out


def brute_repulsion(y: np.ndarray):
    """Exact repulsive accumulators and normalizer, all pairs, dense."""
    d2 = sq_distances(y, y)
    t = 1.0 / (1.0 + d2)
    np.fill_diagonal(t, 0.0)
    z = t.sum()
    diff = y[:, None, :] - y[None, :, :]
    rep = (t**2)[:, :, None] * diff
    return rep.sum(axis=1), float(z)


def kl_objective(p_dense: np.ndarray, y: np.ndarray) -> float:
    """Exact KL(P || Q(y)) with the full low-dimensional normalizer."""
    d2 = sq_distances(y, y)
    t = 1.0 / (1.0 + d2)
    np.fill_diagonal(t, 0.0)
    q = t / t.sum()
    mask = p_dense > 0
    return float(np.sum(p_dense[mask] * np.log(p_dense[mask] / q[mask])))


def achieved_perplexity(d2_row: np.ndarray, beta: float) -> float:
    """Perplexity realized by a calibrated bandwidth, the direct way."""
    return perplexity_of(conditional_affinity(d2_row, beta))


def knn_oracle(d2_full: np.ndarray, k: int):
    """k nearest neighbors by explicit (distance, index) sorting."""
    n = d2_full.shape[0]
    ids = np.empty((n, k), dtype=np.int64)
    dd = np.empty((n, k), dtype=np.float64)
    for i in range(n):
        cand = [(d2_full[i, j], j) for j in range(n) if j != i]
        cand.sort()
        ids[i] = [c[1] for c in cand[:k]]
        dd[i] = [c[0] for c in cand[:k]]
    return ids, dd
