"""Embedding quality: neighborhood preservation and KL diagnostics.

The headline metric is the k-ary neighborhood preservation curve

    kNP(k) = (1/(n k)) sum_i |kNN_HD(i) intersect kNN_LD(i)|

summarized by its area under the curve on a linear k axis (dominated by
large neighborhoods, i.e. global structure) and on a logarithmic k axis
(weighting small neighborhoods, i.e. local structure).

The KL tools mirror the cost function: exact_kl evaluates the full
divergence between joint distributions, and kl_decomposition splits it
into an expected per-point retrieval term plus a prevalence-mismatch
term, which is the identity that justifies reading t-SNE's objective as
a smoothed recall measure.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .core import DataSet, sq_distances
from .errors import ConfigError, KTooLarge, NotNormalized, SupportViolation

_trapezoid = getattr(np, "trapezoid", None) or np.trapz


# ---------------------------------------------------------------------------
# neighborhood preservation
# ---------------------------------------------------------------------------

def rank_matrix(d2: np.ndarray) -> np.ndarray:
    """rank[i, j] = position of j in i's neighbor order, self excluded.

    Neighbors are ordered by (squared distance, index); ranks run from 0
    for the nearest neighbor to n-2, with rank[i, i] = n-1 acting as an
    always-out-of-range sentinel.
    """
    d2 = np.asarray(d2, dtype=np.float64)
    n = d2.shape[0]
    if d2.shape != (n, n):
        raise ConfigError("distance matrix must be square")
    work = d2.copy()
    np.fill_diagonal(work, np.inf)  # push self past every real neighbor
    order = np.argsort(work, axis=1, kind="stable")
    ranks = np.empty((n, n), dtype=np.int32)
    np.put_along_axis(
        ranks, order, np.arange(n, dtype=np.int32)[np.newaxis, :], axis=1
    )
    return ranks


@dataclass
class KnpCurve:
    """Preservation fractions over a grid of neighborhood sizes."""

    ks: np.ndarray            # (num_k,) int64, strictly increasing
    preservation: np.ndarray  # (num_k,) float64 in [0, 1]


def default_k_grid(n: int, num: int = 50) -> np.ndarray:
    """Geometric grid of up to ``num`` distinct integers in [1, n-1]."""
    ks = np.unique(
        np.rint(np.geomspace(1, n - 1, num)).astype(np.int64)
    )
    return ks


def knp_curve(
    data: DataSet | np.ndarray,
    embedding: np.ndarray,
    ks: Optional[np.ndarray] = None,
    hd_ranks: Optional[np.ndarray] = None,
) -> KnpCurve:
    """Neighborhood preservation of an embedding at each k in ``ks``.

    data may be a DataSet or a precomputed high-dimensional squared
    distance matrix; hd_ranks short-circuits the high-dimensional sort
    when several embeddings of the same data are scored.
    """
    y = np.ascontiguousarray(embedding, dtype=np.float64)
    n = y.shape[0]
    if hd_ranks is None:
        if isinstance(data, DataSet):
            hd_d2 = data.sq_distance_matrix()
        else:
            hd_d2 = np.asarray(data, dtype=np.float64)
        if hd_d2.shape != (n, n):
            raise ConfigError(
                "data size does not match the embedding point count"
            )
        hd_ranks = rank_matrix(hd_d2)
    if ks is None:
        ks = default_k_grid(n)
    ks = np.asarray(ks, dtype=np.int64)
    if ks.size == 0:
        raise KTooLarge("need at least one neighborhood size")
    if np.any(ks < 1) or np.any(ks > n - 1):
        raise KTooLarge(
            f"every k must lie in [1, {n - 1}], got range "
            f"[{ks.min()}, {ks.max()}]"
        )
    if np.any(np.diff(ks) <= 0):
        raise ConfigError("ks must be strictly increasing")

    ld_ranks = rank_matrix(sq_distances(y, y))
    # a point j is in both k-neighborhoods of i iff both ranks are < k,
    # so a histogram of max(rank_hd, rank_ld) gives every k at once
    worst = np.maximum(hd_ranks, ld_ranks)
    hist = np.bincount(worst.ravel(), minlength=n + 1).astype(np.float64)
    shared = np.cumsum(hist)  # shared[t] = pairs with max rank <= t
    pres = shared[ks - 1] / (n * ks.astype(np.float64))
    return KnpCurve(ks=ks, preservation=pres)


def auc(curve: KnpCurve, scale: str = "linear") -> float:
    """Area under the preservation curve, normalized to [0, 1].

    scale "linear" integrates over k (large neighborhoods dominate);
    scale "log" integrates over ln k (small neighborhoods dominate).
    """
    ks = curve.ks.astype(np.float64)
    if scale == "linear":
        x = ks
    elif scale == "log":
        x = np.log(ks)
    else:
        raise ConfigError(f"unknown AUC scale {scale!r}")
    if ks.size == 1 or x[-1] == x[0]:
        return float(curve.preservation[0])
    return float(_trapezoid(curve.preservation, x) / (x[-1] - x[0]))


# ---------------------------------------------------------------------------
# KL divergence and its retrieval decomposition
# ---------------------------------------------------------------------------

def exact_kl(p: np.ndarray, q: np.ndarray) -> float:
    """KL(p || q) in nats for flattened distributions.

    Both inputs must be non-negative and sum to 1 within 1e-9; q must
    cover p's support.  Terms with p == 0 contribute zero.
    """
    p = np.asarray(p, dtype=np.float64).ravel()
    q = np.asarray(q, dtype=np.float64).ravel()
    if p.shape != q.shape:
        raise ConfigError("p and q must have the same length")
    for name, v in (("p", p), ("q", q)):
        if v.min() < 0:
            raise NotNormalized(f"{name} has negative entries")
        if abs(v.sum() - 1.0) > 1e-9:
            raise NotNormalized(f"{name} sums to {v.sum()!r}, not 1")
    mask = p > 0
    if np.any(q[mask] == 0):
        raise SupportViolation("q is zero where p has mass")
    return float(np.sum(p[mask] * np.log(p[mask] / q[mask])))


@dataclass
class KlDecomposition:
    """KL(P || Q) split into retrieval and prevalence terms.

    expected_smoothed_recall is sum_i p_i KL(p_.|i || q_.|i) with
    conditionals induced by the joints; prevalence_divergence is
    KL(p_i || q_i) over the per-point marginals; their sum equals
    total_kl by the chain rule.
    """

    expected_smoothed_recall: float
    prevalence_divergence: float
    total_kl: float


def lowdim_joint(y: np.ndarray) -> np.ndarray:
    """Dense joint Q from positions: q_ij = t_ij / Z, zero diagonal."""
    y = np.ascontiguousarray(y, dtype=np.float64)
    t = 1.0 / (1.0 + sq_distances(y, y))
    np.fill_diagonal(t, 0.0)
    return t / t.sum()


def joint_from_conditionals(cond_p: np.ndarray) -> np.ndarray:
    """Symmetrized joint P_ij = (p_j|i + p_i|j) / (2n)."""
    cond_p = np.asarray(cond_p, dtype=np.float64)
    n = cond_p.shape[0]
    if cond_p.shape != (n, n):
        raise ConfigError("conditional matrix must be square")
    if np.any(np.diagonal(cond_p) != 0):
        raise ConfigError("conditionals must have zero self-affinity")
    sums = cond_p.sum(axis=1)
    if np.any(np.abs(sums - 1.0) > 1e-9):
        raise NotNormalized("each conditional row must sum to 1")
    return (cond_p + cond_p.T) / (2.0 * n)


def kl_decomposition(cond_p: np.ndarray, y: np.ndarray) -> KlDecomposition:
    """Split KL(P || Q) into retrieval quality plus prevalence mismatch.

    P comes from the given high-dimensional conditional rows; Q comes
    from the embedding positions.  The three fields are computed
    independently (the total through :func:`exact_kl`), so the chain
    rule identity recall + prevalence = total is a genuine check, not a
    definition.
    """
    big_p = joint_from_conditionals(cond_p)
    n = big_p.shape[0]
    y = np.ascontiguousarray(y, dtype=np.float64)
    if y.shape[0] != n:
        raise ConfigError("embedding size does not match conditionals")
    big_q = lowdim_joint(y)

    p_i = big_p.sum(axis=1)  # equals 1/(2n) + mean incoming conditional mass
    q_i = big_q.sum(axis=1)

    recall = 0.0
    for i in range(n):
        pi_row = big_p[i]
        mask = pi_row > 0
        if not np.any(mask):
            continue
        pc = pi_row[mask] / p_i[i]
        qc = big_q[i, mask] / q_i[i]
        if np.any(qc == 0):
            raise SupportViolation("q conditional is zero where p has mass")
        recall += p_i[i] * float(np.sum(pc * np.log(pc / qc)))

    prevalence = float(np.sum(p_i * np.log(p_i / q_i)))
    total = exact_kl(big_p, big_q)
    return KlDecomposition(
        expected_smoothed_recall=recall,
        prevalence_divergence=prevalence,
        total_kl=total,
    )
