"""Per-thread gradient descent on a partial t-SNE problem.

A worker owns a subset of points, their sparse joint affinities and one
slice of embedding positions.  Each iteration computes exact attractive
forces over the stored affinity pairs and Barnes-Hut approximated
repulsive forces over all in-thread pairs, then applies an adaptive
update: per-component Jacobs gains, a learning rate set by the current
embedding diameter and neighborhood sizes (no exaggeration phase, no
hand-tuned step size), and an epoch-decaying momentum.

All numerics live in numba kernels with fixed accumulation order, so a
partial problem evolves bit-identically no matter which pool thread or
process executes it.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from numba import njit

from .affinity import SparseAffinity
from .errors import ConfigError, NonFiniteEmbedding

_MAX_DEPTH = 60

#: largest thread size for which reported costs use the exact normalizer
EXACT_Z_LIMIT = 5000

#: initial positions are resampled into a disk of this radius
INIT_RADIUS = 0.5


# ---------------------------------------------------------------------------
# quadtree
# ---------------------------------------------------------------------------

@njit(cache=True, nogil=True)
def _quadrant(x, y, cx, cy):
    q = 0
    if x > cx:
        q += 1
    if y > cy:
        q += 2
    return q


@njit(cache=True, nogil=True)
def _tree_build(y, child, com, cnt, cx, cy, half, head, nxt, internal):
    """Insert all points; returns the node count, or -1 if out of slots.

    Leaves hold at most one point except at _MAX_DEPTH, where chains of
    (near-)coincident points are kept on a linked list.  Centers of mass
    are finalized bottom-up in a second pass; child node ids are always
    greater than their parent's, which makes that pass a reverse scan.
    """
    n = y.shape[0]
    cap = child.shape[0]
    child[:] = -1
    head[:] = -1
    internal[:] = False

    minx = y[0, 0]
    maxx = y[0, 0]
    miny = y[0, 1]
    maxy = y[0, 1]
    for p in range(1, n):
        if y[p, 0] < minx:
            minx = y[p, 0]
        if y[p, 0] > maxx:
            maxx = y[p, 0]
        if y[p, 1] < miny:
            miny = y[p, 1]
        if y[p, 1] > maxy:
            maxy = y[p, 1]
    cx[0] = 0.5 * (minx + maxx)
    cy[0] = 0.5 * (miny + maxy)
    h0 = 0.5 * max(maxx - minx, maxy - miny)
    half[0] = h0 * 1.0000001 + 1e-12
    node_count = 1

    for p in range(n):
        node = 0
        dep = 0
        while internal[node]:
            node = child[node, _quadrant(y[p, 0], y[p, 1], cx[node], cy[node])]
            dep += 1
        while True:
            if head[node] == -1:
                head[node] = p
                nxt[p] = -1
                break
            if dep >= _MAX_DEPTH:
                nxt[p] = head[node]
                head[node] = p
                break
            if node_count + 4 > cap:
                return -1
            h2 = 0.5 * half[node]
            for q in range(4):
                c = node_count + q
                child[node, q] = c
                cx[c] = cx[node] + (h2 if q & 1 else -h2)
                cy[c] = cy[node] + (h2 if q & 2 else -h2)
                half[c] = h2
            node_count += 4
            internal[node] = True
            r = head[node]
            head[node] = -1
            cr = child[node, _quadrant(y[r, 0], y[r, 1], cx[node], cy[node])]
            head[cr] = r
            nxt[r] = -1
            node = child[node, _quadrant(y[p, 0], y[p, 1], cx[node], cy[node])]
            dep += 1

    for node in range(node_count - 1, -1, -1):
        if internal[node]:
            c = 0
            sx = 0.0
            sy = 0.0
            for q in range(4):
                ch = child[node, q]
                c += cnt[ch]
                sx += cnt[ch] * com[ch, 0]
                sy += cnt[ch] * com[ch, 1]
            cnt[node] = c
            com[node, 0] = sx / c
            com[node, 1] = sy / c
        else:
            c = 0
            sx = 0.0
            sy = 0.0
            p = head[node]
            while p != -1:
                c += 1
                sx += y[p, 0]
                sy += y[p, 1]
                p = nxt[p]
            cnt[node] = c
            if c > 0:
                com[node, 0] = sx / c
                com[node, 1] = sy / c
            else:
                com[node, 0] = 0.0
                com[node, 1] = 0.0
    return node_count


@njit(cache=True, nogil=True)
def _tree_forces(y, theta, child, com, cnt, cx, cy, half, head, nxt, internal, rep):
    """Unnormalized repulsive accumulators and the normalizer estimate.

    rep[i] = sum_j t_ij^2 (y_i - y_j); the return value is
    Z = sum over ordered pairs of t_ij with t = 1 / (1 + d2).  A cell is
    summarized when width / distance-to-center-of-mass < theta, so
    theta = 0 degenerates to the exact all-pairs sum.
    """
    n = y.shape[0]
    th2 = theta * theta
    stack = np.empty(512, dtype=np.int64)
    z_total = 0.0
    for i in range(n):
        xi = y[i, 0]
        yi = y[i, 1]
        ax = 0.0
        ay = 0.0
        zi = 0.0
        sp = 0
        stack[sp] = 0
        sp += 1
        while sp > 0:
            sp -= 1
            node = stack[sp]
            if cnt[node] == 0:
                continue
            if not internal[node]:
                p = head[node]
                while p != -1:
                    if p != i:
                        dx = xi - y[p, 0]
                        dy = yi - y[p, 1]
                        t = 1.0 / (1.0 + dx * dx + dy * dy)
                        zi += t
                        ax += t * t * dx
                        ay += t * t * dy
                    p = nxt[p]
                continue
            dx = xi - com[node, 0]
            dy = yi - com[node, 1]
            d2 = dx * dx + dy * dy
            w = 2.0 * half[node]
            if w * w < th2 * d2:
                t = 1.0 / (1.0 + d2)
                zi += cnt[node] * t
                ax += cnt[node] * t * t * dx
                ay += cnt[node] * t * t * dy
            else:
                stack[sp] = child[node, 0]
                stack[sp + 1] = child[node, 1]
                stack[sp + 2] = child[node, 2]
                stack[sp + 3] = child[node, 3]
                sp += 4
        rep[i, 0] = ax
        rep[i, 1] = ay
        z_total += zi
    return z_total


@dataclass
class QuadTree:
    """Array-encoded quadtree over 2-D positions."""

    child: np.ndarray
    com: np.ndarray
    cnt: np.ndarray
    cx: np.ndarray
    cy: np.ndarray
    half: np.ndarray
    head: np.ndarray
    nxt: np.ndarray
    internal: np.ndarray
    node_count: int
    positions: np.ndarray


def _alloc_tree(nu: int, cap: int):
    return (
        np.empty((cap, 4), dtype=np.int64),
        np.zeros((cap, 2), dtype=np.float64),
        np.zeros(cap, dtype=np.int64),
        np.zeros(cap, dtype=np.float64),
        np.zeros(cap, dtype=np.float64),
        np.zeros(cap, dtype=np.float64),
        np.empty(cap, dtype=np.int64),
        np.empty(nu, dtype=np.int64),
        np.zeros(cap, dtype=np.bool_),
    )


def build_quadtree(y: np.ndarray) -> QuadTree:
    """Build the quadtree for a position array (nu, 2)."""
    y = np.ascontiguousarray(y, dtype=np.float64)
    if y.ndim != 2 or y.shape[1] != 2 or y.shape[0] < 1:
        raise ConfigError("positions must have shape (nu, 2) with nu >= 1")
    cap = 8 * y.shape[0] + 1024
    for _ in range(4):
        bufs = _alloc_tree(y.shape[0], cap)
        count = _tree_build(y, *bufs)
        if count > 0:
            return QuadTree(*bufs, node_count=int(count), positions=y)
        cap *= 4
    raise ConfigError("quadtree capacity exhausted; positions degenerate")


def repulsive_forces_bh(tree: QuadTree, theta: float):
    """(accumulators, Z) for the repulsive side at opening angle theta."""
    if not 0.0 <= theta <= 1.0:
        raise ConfigError(f"theta must lie in [0, 1], got {theta}")
    rep = np.empty_like(tree.positions)
    z = _tree_forces(
        tree.positions, float(theta), tree.child, tree.com, tree.cnt,
        tree.cx, tree.cy, tree.half, tree.head, tree.nxt, tree.internal, rep,
    )
    return rep, float(z)


# ---------------------------------------------------------------------------
# attractive forces
# ---------------------------------------------------------------------------

@njit(cache=True, nogil=True)
def _attr_forces(indptr, indices, vals, y, attr):
    """attr[i] = sum over stored pairs of p_ij (y_i - y_j) / (1 + d2)."""
    nu = y.shape[0]
    for i in range(nu):
        ax = 0.0
        ay = 0.0
        for e in range(indptr[i], indptr[i + 1]):
            j = indices[e]
            dx = y[i, 0] - y[j, 0]
            dy = y[i, 1] - y[j, 1]
            t = 1.0 / (1.0 + dx * dx + dy * dy)
            ax += vals[e] * t * dx
            ay += vals[e] * t * dy
        attr[i, 0] = ax
        attr[i, 1] = ay


def attractive_forces(p: SparseAffinity, y: np.ndarray) -> np.ndarray:
    """Exact sparse attractive force accumulation over stored pairs."""
    y = np.ascontiguousarray(y, dtype=np.float64)
    attr = np.empty_like(y)
    _attr_forces(p.indptr, p.indices, p.vals, y, attr)
    return attr


# ---------------------------------------------------------------------------
# adaptive step pieces
# ---------------------------------------------------------------------------

def embedding_diameter(y: np.ndarray) -> float:
    """Diagonal of the bounding box, floored away from zero."""
    dx = float(y[:, 0].max() - y[:, 0].min())
    dy = float(y[:, 1].max() - y[:, 1].min())
    return max(np.sqrt(dx * dx + dy * dy), 1e-12)


def learning_rate(diameter: float, nu: int, nki: int, gain: float) -> float:
    """Step scale 2 (d + 1/d) ln(nu * |N_i|) g_i.

    The diameter term keeps steps proportionate as the embedding grows,
    the log term supplies the scale-free size factor, and the gain is
    the per-component Jacobs multiplier.
    """
    return 2.0 * (diameter + 1.0 / diameter) * np.log(nu * max(nki, 1)) * gain


def momentum(epoch: int, epochs: int) -> float:
    """Decaying momentum 0.8 (1 - e / epochs)^2 for epoch index e."""
    if epochs <= 0:
        raise ConfigError("epochs must be positive")
    frac = 1.0 - epoch / epochs
    return 0.8 * frac * frac


def update_gains(gain: float, grad_c: float, prev_step_c: float) -> float:
    """Jacobs rule: +0.2 when the step direction is stable, else *0.8.

    Stability means the gradient component and the previous update
    component do not share a sign (a negative gradient keeps pushing a
    previously positive step).  Floored at 0.01.
    """
    sg = (grad_c > 0) - (grad_c < 0)
    sv = (prev_step_c > 0) - (prev_step_c < 0)
    if sg != sv:
        gain += 0.2
    else:
        gain *= 0.8
    return max(gain, 0.01)


def init_embedding(nu: int, rng: np.random.Generator) -> np.ndarray:
    """Isotropic Gaussian draws resampled into the half-unit disk.

    sigma = radius / 3 per axis; any draw with norm > 0.5 is redrawn, so
    every initial position lies within the half-unit disk.
    """
    if nu < 1:
        raise ConfigError("need at least one point")
    sigma = INIT_RADIUS / 3.0
    y = rng.normal(0.0, sigma, size=(nu, 2))
    while True:
        bad = np.flatnonzero(y[:, 0] ** 2 + y[:, 1] ** 2 > INIT_RADIUS**2)
        if bad.size == 0:
            return y
        y[bad] = rng.normal(0.0, sigma, size=(bad.size, 2))


# ---------------------------------------------------------------------------
# fused iteration kernels
# ---------------------------------------------------------------------------

@njit(cache=True, nogil=True)
def _one_iteration(
    y, indptr, indices, vals, lognki, mu, theta,
    gains, vel, attr, rep,
    child, com, cnt, cx, cy, half, head, nxt, internal,
):
    """One descent iteration in place; returns (status, Z).

    status: 0 ok, 1 non-finite positions, -1 tree capacity exhausted.
    """
    nu = y.shape[0]
    _attr_forces(indptr, indices, vals, y, attr)
    count = _tree_build(y, child, com, cnt, cx, cy, half, head, nxt, internal)
    if count < 0:
        return -1, 0.0
    z = _tree_forces(
        y, theta, child, com, cnt, cx, cy, half, head, nxt, internal, rep
    )

    minx = y[0, 0]
    maxx = y[0, 0]
    miny = y[0, 1]
    maxy = y[0, 1]
    for i in range(1, nu):
        if y[i, 0] < minx:
            minx = y[i, 0]
        if y[i, 0] > maxx:
            maxx = y[i, 0]
        if y[i, 1] < miny:
            miny = y[i, 1]
        if y[i, 1] > maxy:
            maxy = y[i, 1]
    dx = maxx - minx
    dy = maxy - miny
    diam = np.sqrt(dx * dx + dy * dy)
    if diam < 1e-12:
        diam = 1e-12
    eta_base = 2.0 * (diam + 1.0 / diam)

    sx = 0.0
    sy = 0.0
    for i in range(nu):
        for d in range(2):
            g = attr[i, d] - rep[i, d] / z
            v = vel[i, d]
            sg = (1 if g > 0 else 0) - (1 if g < 0 else 0)
            sv = (1 if v > 0 else 0) - (1 if v < 0 else 0)
            if sg != sv:
                gains[i, d] += 0.2
            else:
                gains[i, d] *= 0.8
            if gains[i, d] < 0.01:
                gains[i, d] = 0.01
            eta = eta_base * lognki[i] * gains[i, d]
            v = mu * v - eta * g
            vel[i, d] = v
            y[i, d] += v
        sx += y[i, 0]
        sy += y[i, 1]
    sx /= nu
    sy /= nu
    ok = True
    for i in range(nu):
        y[i, 0] -= sx
        y[i, 1] -= sy
        if not (np.isfinite(y[i, 0]) and np.isfinite(y[i, 1])):
            ok = False
    if not ok:
        return 1, z
    return 0, z


@njit(cache=True, nogil=True)
def _cross_entropy_term(indptr, indices, vals, y):
    """sum over stored pairs of p_ij * ln(1 / (1 + d2))."""
    nu = y.shape[0]
    s = 0.0
    for i in range(nu):
        for e in range(indptr[i], indptr[i + 1]):
            j = indices[e]
            dx = y[i, 0] - y[j, 0]
            dy = y[i, 1] - y[j, 1]
            s -= vals[e] * np.log1p(dx * dx + dy * dy)
    return s


@njit(cache=True, nogil=True)
def _z_exact(y):
    """Exact ordered-pair normalizer sum_{k != l} 1 / (1 + d2)."""
    nu = y.shape[0]
    z = 0.0
    for i in range(nu):
        for j in range(i + 1, nu):
            dx = y[i, 0] - y[j, 0]
            dy = y[i, 1] - y[j, 1]
            z += 2.0 / (1.0 + dx * dx + dy * dy)
    return z


@njit(cache=True, nogil=True)
def _optimize_loop(
    y, indptr, indices, vals, lognki, mu_arr, theta,
    gains, vel, diag, norm_const,
    child, com, cnt, cx, cy, half, head, nxt, internal,
):
    """Run len(mu_arr) iterations; returns (status, failing iteration)."""
    nu = y.shape[0]
    attr = np.empty((nu, 2), dtype=np.float64)
    rep = np.empty((nu, 2), dtype=np.float64)
    for t in range(mu_arr.shape[0]):
        status, z = _one_iteration(
            y, indptr, indices, vals, lognki, mu_arr[t], theta,
            gains, vel, attr, rep,
            child, com, cnt, cx, cy, half, head, nxt, internal,
        )
        if status != 0:
            return status, t
        if diag.shape[0] > 0:
            totp = 0.0
            for e in range(vals.shape[0]):
                totp += vals[e]
            cross = _cross_entropy_term(indptr, indices, vals, y)
            diag[t, 0] = (-cross + totp * np.log(z)) / norm_const
            mnx = y[0, 0]
            mxx = y[0, 0]
            mny = y[0, 1]
            mxy = y[0, 1]
            for i in range(1, nu):
                if y[i, 0] < mnx:
                    mnx = y[i, 0]
                if y[i, 0] > mxx:
                    mxx = y[i, 0]
                if y[i, 1] < mny:
                    mny = y[i, 1]
                if y[i, 1] > mxy:
                    mxy = y[i, 1]
            ddx = mxx - mnx
            ddy = mxy - mny
            diag[t, 1] = np.sqrt(ddx * ddx + ddy * ddy)
            gs = 0.0
            for i in range(nu):
                gs += gains[i, 0] + gains[i, 1]
            diag[t, 2] = gs / (2.0 * nu)
    return 0, mu_arr.shape[0]


# ---------------------------------------------------------------------------
# partial problem driver
# ---------------------------------------------------------------------------

@dataclass
class PartialProblem:
    """One thread's share of the embedding for one epoch."""

    members: np.ndarray        # (nu,) global point ids
    slots: np.ndarray          # (nu,) layer each point came from / returns to
    affinity: SparseAffinity
    y: np.ndarray              # (nu, 2), updated in place
    gains: np.ndarray          # (nu, 2)
    step: np.ndarray           # (nu, 2) previous update (velocity)
    lognki: np.ndarray         # (nu,) ln(nu * max(nki, 1))

    @classmethod
    def fresh(cls, members, slots, affinity: SparseAffinity, y: np.ndarray):
        nu = affinity.nu
        lognki = np.log(
            float(nu) * np.maximum(affinity.nki, 1).astype(np.float64)
        )
        return cls(
            members=members,
            slots=slots,
            affinity=affinity,
            y=np.ascontiguousarray(y, dtype=np.float64),
            gains=np.ones((nu, 2), dtype=np.float64),
            step=np.zeros((nu, 2), dtype=np.float64),
            lognki=lognki,
        )


def gradient_step(problem: PartialProblem, mu: float, theta: float) -> None:
    """Apply a single adaptive descent iteration to a partial problem."""
    run_iterations(problem, np.full(1, float(mu)), theta)


def run_iterations(
    problem: PartialProblem,
    mu_per_iter: np.ndarray,
    theta: float,
    collect_diag: bool = False,
) -> Optional[np.ndarray]:
    """Advance a partial problem by len(mu_per_iter) iterations in place.

    Returns the per-iteration diagnostics array (cost with the
    Barnes-Hut estimated normalizer, diameter, mean gain) when
    collect_diag is set, else None.  Raises NonFiniteEmbedding (with a
    placeholder thread id) when positions blow up; the engine re-raises
    with the owning thread attached.
    """
    if not 0.0 <= theta <= 1.0:
        raise ConfigError(f"theta must lie in [0, 1], got {theta}")
    mu_per_iter = np.ascontiguousarray(mu_per_iter, dtype=np.float64)
    nu = problem.affinity.nu
    iters = mu_per_iter.shape[0]
    diag = np.zeros((iters if collect_diag else 0, 3), dtype=np.float64)
    norm_const = np.log(float(nu) * float(nu - 1))
    y0 = problem.y.copy()
    g0 = problem.gains.copy()
    v0 = problem.step.copy()
    cap = 8 * nu + 1024
    for _ in range(4):
        bufs = _alloc_tree(nu, cap)
        status, it = _optimize_loop(
            problem.y, problem.affinity.indptr, problem.affinity.indices,
            problem.affinity.vals, problem.lognki, mu_per_iter, float(theta),
            problem.gains, problem.step, diag, norm_const, *bufs,
        )
        if status == 0:
            return diag if collect_diag else None
        if status == 1:
            raise NonFiniteEmbedding(thread=-1, iteration=int(it))
        # tree capacity exhausted mid-run: restart from the saved state
        problem.y[:] = y0
        problem.gains[:] = g0
        problem.step[:] = v0
        cap *= 4
    raise ConfigError("quadtree capacity exhausted; positions degenerate")


def partial_cost(
    p: SparseAffinity, y: np.ndarray, theta: float = 0.5
) -> tuple[float, bool]:
    """Pseudo-normalized cost of one partial problem.

    C = -sum p_ij ln q_ij / ln(nu (nu - 1)), which is ~1 for a random
    half-unit-disk init and decreases as structure forms.  The
    normalizer Z is exact up to EXACT_Z_LIMIT points; above that it is
    Barnes-Hut estimated and the returned flag is True.
    """
    y = np.ascontiguousarray(y, dtype=np.float64)
    nu = p.nu
    if nu != y.shape[0]:
        raise ConfigError("positions do not match the affinity problem")
    estimated = nu > EXACT_Z_LIMIT
    if estimated:
        tree = build_quadtree(y)
        _, z = repulsive_forces_bh(tree, theta)
    else:
        z = float(_z_exact(y))
    cross = float(_cross_entropy_term(p.indptr, p.indices, p.vals, y))
    totp = float(p.vals.sum())
    cost = (-cross + totp * np.log(z)) / np.log(float(nu) * float(nu - 1))
    return cost, estimated
