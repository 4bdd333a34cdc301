"""High-dimensional affinities under a single perplexity knob.

Every point stores its k = round(3 * perplexity) nearest neighbors and a
Gaussian bandwidth calibrated so the conditional distribution over those
neighbors has the requested perplexity.  Worker threads later restrict
each row to in-thread members and renormalize, which is what
:func:`partial_joint_affinities` builds.

The calibration solves for the precision beta = 1 / (2 sigma^2) by
bisecting log-perplexity, evaluated through the identity

    ln(perp) = ln(C') + (beta / C') * sum_j r_j * exp(-beta * r_j)

where r_j = d2_j - min(d2) and C' is the shifted normalizer, so the
expression stays finite and cancellation-free for arbitrarily large
beta.  Rows whose neighbor distances are numerically all equal have a
closed form through the real branch of the Lambert W function.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numba import njit

from .core import DataSet
from .errors import (
    ConfigError,
    DataFormatError,
    NoConvergence,
    NoRealSolution,
    NotNormalized,
    PerplexityTooLarge,
)
from .neighbors import exact_knn, knn_from_d2

log = logging.getLogger("ptsne")

# bandwidth solve status codes (shared by the numba kernels)
_OK = 0
_AT_LIMIT = 1        # ppx equals neighbor count; beta = 0 exactly
_DEGENERATE = 2      # equidistant row solved via Lambert W
_CLAMPED = 3         # target below the tie floor; beta clamped at bracket top
_NO_REAL = 4         # degenerate row with no real bandwidth
_NO_CONVERGENCE = 5  # bisection failed to reach tolerance

#: relative spread below which a neighbor row counts as equidistant
_DEGENERATE_SPREAD = 1e-12


def round_half_up(x: float) -> int:
    """round() with ties away from zero, as used for k = round(3 * ppx)."""
    return int(np.floor(x + 0.5))


# ---------------------------------------------------------------------------
# Lambert W, principal real branch
# ---------------------------------------------------------------------------

@njit(cache=True, nogil=True)
def _lambert_w0(a):
    """W0(a) for a in [-1/e, 0] by Halley iteration.

    Seeded with the series around the branch point at -1/e, where the
    derivative blows up and a naive Newton start would crawl.
    """
    if a == 0.0:
        return 0.0
    arg = 2.0 * (1.0 + np.e * a)
    if arg <= 0.0:  # rounding can push the branch point a hair negative
        return -1.0
    p = np.sqrt(arg)
    # series for W0 near the branch point; fine as a seed on all of [-1/e, 0)
    w = -1.0 + p - (p * p) / 3.0 + (11.0 / 72.0) * p**3
    if w > -1e-6:
        w = -1e-6  # keep the seed on the branch side of 0 for negative a
    for _ in range(100):
        ew = np.exp(w)
        f = w * ew - a
        wp1 = w + 1.0
        if f == 0.0 or wp1 == 0.0:
            break
        denom = ew * wp1 - (w + 2.0) * f / (2.0 * wp1)
        step = f / denom
        w = w - step
        if abs(step) <= 1e-14 * (2.0 + abs(w)):
            break
    return w


def lambert_w0(a: float) -> float:
    """Principal real branch of w * exp(w) = a, for a in [-1/e, 0]."""
    if a < -1.0 / np.e or a > 0.0:
        raise NoRealSolution(f"W0 argument {a} outside [-1/e, 0]")
    return float(_lambert_w0(a))


# ---------------------------------------------------------------------------
# entropy identity and bandwidth solve
# ---------------------------------------------------------------------------

@njit(cache=True, nogil=True)
def _log_perplexity(d2, beta):
    """ln of the perplexity of the conditional row at precision beta.

    Works on distances shifted by the row minimum throughout, so every
    term stays small and non-negative: writing r = d2 - m, the entropy
    is ln(sum e^{-beta r}) + beta * (sum r e^{-beta r}) / (sum e^{-beta r}).
    The unshifted form subtracts two beta-sized terms and loses the
    tie-floor plateau to cancellation once beta gets large.
    """
    m = d2[0]
    for t in range(1, d2.shape[0]):
        if d2[t] < m:
            m = d2[t]
    cs = 0.0
    ws = 0.0
    for t in range(d2.shape[0]):
        r = d2[t] - m
        e = np.exp(-beta * r)
        cs += e
        ws += r * e
    return np.log(cs) + beta * ws / cs


@njit(cache=True, nogil=True)
def _solve_beta_one(d2, ppx, tol, max_iter):
    """Calibrate one row; returns (beta, status)."""
    k = d2.shape[0]
    if ppx == k:
        return 0.0, _AT_LIMIT

    dmax = d2[0]
    dmin = d2[0]
    dsum = 0.0
    for t in range(k):
        if d2[t] > dmax:
            dmax = d2[t]
        if d2[t] < dmin:
            dmin = d2[t]
        dsum += d2[t]

    if dmax <= 0.0:
        # all neighbors coincide with the point; the Lambert route in the
        # limit E -> 0 gives beta = pi / ppx^2 (any beta yields a uniform row)
        return np.pi / (ppx * ppx), _DEGENERATE
    if (dmax - dmin) / dmax < _DEGENERATE_SPREAD:
        e_mean = dsum / k
        a = -2.0 * np.pi * e_mean / (ppx * ppx)
        if a < -1.0 / np.e:
            return 0.0, _NO_REAL
        w = _lambert_w0(a)
        return -w / (2.0 * e_mean), _DEGENERATE

    target = np.log(ppx)
    tol_ln = tol * np.log(2.0)  # tolerance is stated in log2 units

    lo = 0.0
    hi = 1.0 / (dsum / k)
    val = _log_perplexity(d2, hi)
    doublings = 0
    while val > target:
        lo = hi
        hi *= 2.0
        val = _log_perplexity(d2, hi)
        doublings += 1
        if doublings >= 200:
            # ties put a floor on perplexity; report the most peaked
            # bracket endpoint rather than looping forever
            return hi, _CLAMPED
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        val = _log_perplexity(d2, mid)
        if abs(val - target) <= tol_ln:
            return mid, _OK
        if val > target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi), _NO_CONVERGENCE


@njit(cache=True, nogil=True)
def _solve_beta_all(d2, ppx, tol, max_iter):
    n = d2.shape[0]
    beta = np.empty(n, dtype=np.float64)
    status = np.empty(n, dtype=np.int64)
    for i in range(n):
        b, s = _solve_beta_one(d2[i], ppx, tol, max_iter)
        beta[i] = b
        status[i] = s
    return beta, status


def solve_bandwidth(
    d2: np.ndarray, ppx: float, tol: float = 1e-5, max_iter: int = 200
) -> float:
    """Precision beta for one neighbor-distance row at the given perplexity.

    Guarantees |log2 achieved - log2 requested| <= tol except when tied
    distances bound the perplexity away from the target, in which case
    the most peaked bracketed value is returned and a warning logged.
    """
    d2 = np.ascontiguousarray(d2, dtype=np.float64)
    if d2.ndim != 1 or d2.shape[0] < 1:
        raise ConfigError("d2 must be a non-empty 1-D array")
    if not 1.0 <= ppx <= d2.shape[0]:
        raise ConfigError(
            f"perplexity {ppx} outside [1, {d2.shape[0]}] for this row"
        )
    beta, status = _solve_beta_one(d2, float(ppx), float(tol), int(max_iter))
    if status == _NO_REAL:
        raise NoRealSolution(
            f"no real bandwidth: ppx^2 = {ppx * ppx:.6g} below 2*pi*e*E "
            f"for equidistant row with E = {np.mean(d2):.6g}"
        )
    if status == _NO_CONVERGENCE:
        raise NoConvergence(
            f"bandwidth bisection missed tolerance {tol} in {max_iter} steps"
        )
    if status == _CLAMPED:
        log.warning(
            "perplexity %.4g unreachable (tied neighbor distances); "
            "clamping beta at %.4g", ppx, beta
        )
    return float(beta)


def solve_bandwidth_degenerate(e_mean: float, ppx: float) -> float:
    """Closed-form bandwidth for a row whose k distances all equal e_mean.

    Solves sqrt(beta/pi) * exp(-beta * e_mean) = 1/ppx via the principal
    Lambert branch: beta = -W0(-2 pi e_mean / ppx^2) / (2 e_mean).
    Requires ppx^2 >= 2 pi e e_mean for a real solution.
    """
    if e_mean < 0:
        raise ConfigError("mean squared distance must be non-negative")
    if ppx <= 0:
        raise ConfigError("perplexity must be positive")
    if e_mean == 0.0:
        return float(np.pi / (ppx * ppx))
    a = -2.0 * np.pi * e_mean / (ppx * ppx)
    if a < -1.0 / np.e:
        raise NoRealSolution(
            f"ppx^2 = {ppx * ppx:.6g} < 2*pi*e*E = {2 * np.pi * np.e * e_mean:.6g}"
        )
    return float(-_lambert_w0(a) / (2.0 * e_mean))


def conditional_affinity(d2: np.ndarray, beta: float) -> np.ndarray:
    """Normalized Gaussian row exp(-beta d2) / sum, max-shifted for safety."""
    d2 = np.ascontiguousarray(d2, dtype=np.float64)
    w = np.exp(-beta * (d2 - d2.min()))
    return w / w.sum()


def perplexity_of(p: np.ndarray) -> float:
    """2 ** (Shannon entropy in bits) of a normalized distribution."""
    p = np.ascontiguousarray(p, dtype=np.float64)
    if p.min() < 0:
        raise NotNormalized("probabilities must be non-negative")
    if abs(p.sum() - 1.0) > 1e-9:
        raise NotNormalized(f"probabilities sum to {p.sum()!r}, not 1")
    nz = p[p > 0]
    h_bits = -float(np.sum(nz * np.log2(nz)))
    return float(2.0**h_bits)


# ---------------------------------------------------------------------------
# the neighbor index
# ---------------------------------------------------------------------------

@dataclass
class NeighborIndex:
    """Global per-point neighborhoods plus calibrated bandwidths.

    ids/d2 hold each point's k nearest neighbors ordered by (distance,
    index); beta is the calibrated precision; L is the squared radius of
    the stored neighborhood (distance to the k-th neighbor), the cutoff
    workers use for membership tests.
    """

    ppx: float
    k: int
    ids: np.ndarray   # (n, k) int64
    d2: np.ndarray    # (n, k) float64
    beta: np.ndarray  # (n,) float64
    L: np.ndarray     # (n,) float64

    @property
    def n(self) -> int:
        return self.ids.shape[0]


def build_neighbor_index(
    data: DataSet,
    ppx: float,
    tol: float = 1e-5,
    max_iter: int = 200,
    knn_engine: str = "auto",
    d2_full: np.ndarray | None = None,
) -> NeighborIndex:
    """Exact k = round(3 * ppx) neighbor lists with calibrated bandwidths.

    d2_full optionally short-circuits the neighbor scan with a
    precomputed DataSet.sq_distance_matrix(); the selection rule is the
    same, so the index comes out bit-identical either way.
    """
    n = data.n
    if ppx < 1.0:
        raise ConfigError(f"perplexity must be >= 1, got {ppx}")
    k = round_half_up(3.0 * ppx)
    if 3.0 * ppx > n - 1:
        raise PerplexityTooLarge(
            f"3 * ppx = {3.0 * ppx:.6g} exceeds n - 1 = {n - 1}"
        )
    k = min(k, n - 1)
    if d2_full is not None:
        ids, d2 = knn_from_d2(d2_full, k)
    else:
        ids, d2 = exact_knn(data, k, engine=knn_engine)
    beta, status = _solve_beta_all(d2, float(ppx), float(tol), int(max_iter))
    n_no_real = int(np.sum(status == _NO_REAL))
    if n_no_real:
        raise NoRealSolution(
            f"{n_no_real} equidistant rows admit no real bandwidth at "
            f"ppx = {ppx} (need ppx^2 >= 2*pi*e*E)"
        )
    n_no_conv = int(np.sum(status == _NO_CONVERGENCE))
    if n_no_conv:
        raise NoConvergence(
            f"bandwidth bisection failed on {n_no_conv} of {n} rows"
        )
    n_clamped = int(np.sum(status == _CLAMPED))
    if n_clamped:
        log.warning(
            "%d of %d rows have tied neighbor distances that floor the "
            "perplexity above %.4g; their bandwidths were clamped",
            n_clamped, n, ppx,
        )
    return NeighborIndex(
        ppx=float(ppx), k=k, ids=ids, d2=d2, beta=beta, L=d2[:, -1].copy()
    )


# ---------------------------------------------------------------------------
# binary cache
# ---------------------------------------------------------------------------

_MAGIC = b"PTNI"


def save_index(index: NeighborIndex, path) -> None:
    """Write an index cache: magic, n, k, then ids, d2, beta, L arrays.

    Everything is little-endian; ids are int64, the rest float64.
    """
    path = Path(path)
    n, k = index.ids.shape
    with path.open("wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<QQ", n, k))
        fh.write(np.ascontiguousarray(index.ids, dtype="<i8").tobytes())
        fh.write(np.ascontiguousarray(index.d2, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(index.beta, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(index.L, dtype="<f8").tobytes())


def load_index(path, ppx: float | None = None) -> NeighborIndex:
    """Read an index cache written by :func:`save_index`.

    When ppx is given, the stored k must equal round(3 * ppx); this is
    the consistency check that catches a cache built for another knob.
    """
    path = Path(path)
    raw = path.read_bytes()
    head = len(_MAGIC) + 16
    if len(raw) < head or raw[: len(_MAGIC)] != _MAGIC:
        raise DataFormatError(f"{path}: not a neighbor index cache")
    n, k = struct.unpack_from("<QQ", raw, len(_MAGIC))
    need = head + 8 * (n * k * 2 + n * 2)
    if len(raw) != need:
        raise DataFormatError(
            f"{path}: truncated index cache ({len(raw)} bytes, need {need})"
        )
    if ppx is not None and round_half_up(3.0 * ppx) != k:
        raise ConfigError(
            f"{path}: cache was built with k = {k}, but ppx = {ppx} "
            f"needs k = {round_half_up(3.0 * ppx)}"
        )
    off = head
    ids = np.frombuffer(raw, dtype="<i8", count=n * k, offset=off).reshape(n, k)
    off += 8 * n * k
    d2 = np.frombuffer(raw, dtype="<f8", count=n * k, offset=off).reshape(n, k)
    off += 8 * n * k
    beta = np.frombuffer(raw, dtype="<f8", count=n, offset=off)
    off += 8 * n
    big_l = np.frombuffer(raw, dtype="<f8", count=n, offset=off)
    return NeighborIndex(
        ppx=float(ppx) if ppx is not None else k / 3.0,
        k=int(k),
        ids=ids.astype(np.int64),
        d2=d2.astype(np.float64),
        beta=beta.astype(np.float64),
        L=big_l.astype(np.float64),
    )


# ---------------------------------------------------------------------------
# per-thread joint affinities
# ---------------------------------------------------------------------------

@dataclass
class SparseAffinity:
    """Symmetric joint affinities of one thread's points, CSR layout.

    Entry (i, j) holds (p_{j|i} + p_{i|j}) / (2 nu) where the
    conditionals are renormalized over in-thread stored neighbors with
    the globally calibrated bandwidths.  nki[i] is the size of point i's
    in-thread conditional neighborhood; points with nki == 0 contribute
    no outgoing mass (they only appear through other points' rows).
    """

    indptr: np.ndarray   # (nu + 1,) int64
    indices: np.ndarray  # (nnz,) int64, local column ids
    vals: np.ndarray     # (nnz,) float64
    nu: int
    nki: np.ndarray      # (nu,) int64
    n_isolated: int

    @property
    def total_mass(self) -> float:
        return float(self.vals.sum())


@njit(cache=True, nogil=True)
def _assemble_partial(members, in_thread, ids, d2, beta):
    nu = members.shape[0]
    k = ids.shape[1]

    deg = np.zeros(nu + 1, dtype=np.int64)
    nki = np.zeros(nu, dtype=np.int64)
    for i in range(nu):
        g = members[i]
        for e in range(k):
            lj = in_thread[ids[g, e]]
            if lj >= 0:
                nki[i] += 1
                deg[i + 1] += 1
                deg[lj + 1] += 1
    for i in range(nu):
        deg[i + 1] += deg[i]
    nnz_raw = deg[nu]

    cols = np.empty(nnz_raw, dtype=np.int64)
    vals = np.empty(nnz_raw, dtype=np.float64)
    cursor = deg[:nu].copy()

    for i in range(nu):
        g = members[i]
        if nki[i] == 0:
            continue
        # renormalized conditional over the in-thread stored neighbors,
        # max-shifted with the subset minimum
        mn = np.inf
        for e in range(k):
            if in_thread[ids[g, e]] >= 0 and d2[g, e] < mn:
                mn = d2[g, e]
        cs = 0.0
        for e in range(k):
            if in_thread[ids[g, e]] >= 0:
                cs += np.exp(-beta[g] * (d2[g, e] - mn))
        for e in range(k):
            lj = in_thread[ids[g, e]]
            if lj >= 0:
                w = np.exp(-beta[g] * (d2[g, e] - mn)) / cs
                cols[cursor[i]] = lj
                vals[cursor[i]] = w
                cursor[i] += 1
                cols[cursor[lj]] = i
                vals[cursor[lj]] = w
                cursor[lj] += 1

    # per-row sort by column and merge duplicates: (i, j) ends up holding
    # p_{j|i} + p_{i|j} whenever both directions were stored
    out_indptr = np.zeros(nu + 1, dtype=np.int64)
    out_cols = np.empty(nnz_raw, dtype=np.int64)
    out_vals = np.empty(nnz_raw, dtype=np.float64)
    w = 0
    for i in range(nu):
        lo = deg[i]
        hi = cursor[i]
        order = np.argsort(cols[lo:hi], kind="mergesort")
        prev = -1
        for t in range(hi - lo):
            c = cols[lo + order[t]]
            v = vals[lo + order[t]]
            if c == prev:
                out_vals[w - 1] += v
            else:
                out_cols[w] = c
                out_vals[w] = v
                w += 1
                prev = c
        out_indptr[i + 1] = w

    scale = 1.0 / (2.0 * nu)
    for t in range(w):
        out_vals[t] *= scale
    return out_indptr, out_cols[:w].copy(), out_vals[:w].copy(), nki


def partial_joint_affinities(members: np.ndarray, index: NeighborIndex) -> SparseAffinity:
    """Joint affinities restricted to one thread's members.

    members holds global point ids in thread-local order.  Membership of
    a neighbor is decided on the stored global lists, so every pair used
    here satisfies d2(i, j) <= L_i for the row that contributed it.
    """
    members = np.ascontiguousarray(members, dtype=np.int64)
    nu = members.shape[0]
    if nu < 2:
        raise ConfigError("a partial problem needs at least 2 points")
    in_thread = np.full(index.n, -1, dtype=np.int64)
    in_thread[members] = np.arange(nu, dtype=np.int64)
    indptr, indices, vals, nki = _assemble_partial(
        members, in_thread, index.ids, index.d2, index.beta
    )
    n_isolated = int(np.sum(nki == 0))
    return SparseAffinity(
        indptr=indptr,
        indices=indices,
        vals=vals,
        nu=nu,
        nki=nki,
        n_isolated=n_isolated,
    )
