"""Epoch-parallel orchestration: chunk, mix, descend, pool.

One run keeps ``layers`` complete copies of the embedding.  Every epoch
the points are shuffled into ``threads`` chunks; thread t receives
chunks t, t+1, ..., t+layers-1 (mod threads), reading chunk t+j from
layer j and writing it back there at the epoch barrier.  Chunks are
near-equal, so each thread works a fraction rho = layers / threads of
the data; between epochs the shuffle re-mixes which points share a
partial problem, which is what couples the layers together.

Workers are independent partial problems with fixed reduction orders,
so results are bit-identical for any pool width, including width 1.
"""

from __future__ import annotations

import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .affinity import (
    NeighborIndex,
    build_neighbor_index,
    partial_joint_affinities,
    round_half_up,
)
from .core import DataSet, RngStream
from .errors import (
    ConfigError,
    IncompleteEpoch,
    NonFiniteEmbedding,
    PtsneError,
    WorkerFailure,
)
from .worker import (
    PartialProblem,
    init_embedding,
    momentum,
    partial_cost,
    run_iterations,
)


def epoch_count(n: int) -> int:
    """Default number of epochs, ceil(2 ln n^2)."""
    if n < 2:
        raise ConfigError("need at least 2 points")
    return math.ceil(4.0 * math.log(n))


def iters_per_epoch(nu: int) -> int:
    """Default iterations per epoch, ceil(2 ln nu^2) for thread size nu."""
    if nu < 2:
        raise ConfigError("thread size must be at least 2")
    return math.ceil(4.0 * math.log(nu))


@dataclass
class RunConfig:
    """Knobs for one run.  Perplexity is the only required one.

    epochs and iters default to the size-derived schedules above;
    exaggeration is fixed at 1 because the adaptive learning rate
    replaces the usual early-exaggeration phase.
    """

    ppx: float
    threads: int = 1
    layers: int = 1
    theta: float = 0.5
    epochs: Optional[int] = None
    iters: Optional[int] = None
    seed: int = 0
    use_momentum: bool = True
    tol: float = 1e-5
    max_iter: int = 200

    @property
    def exaggeration(self) -> float:
        return 1.0

    @property
    def rho(self) -> float:
        return self.layers / self.threads

    def nu(self, n: int) -> int:
        """Nominal thread size round(rho * n)."""
        return round_half_up(self.rho * n)

    def validate(self, n: int) -> None:
        if self.ppx <= 1.0:
            raise ConfigError(f"perplexity must exceed 1, got {self.ppx}")
        if self.threads < 1:
            raise ConfigError(f"threads must be >= 1, got {self.threads}")
        if not 1 <= self.layers <= self.threads:
            raise ConfigError(
                f"layers must lie in [1, threads], got layers={self.layers} "
                f"threads={self.threads}"
            )
        if not 0.0 <= self.theta <= 1.0:
            raise ConfigError(f"theta must lie in [0, 1], got {self.theta}")
        if self.epochs is not None and self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.iters is not None and self.iters < 1:
            raise ConfigError("iters must be >= 1")
        if n // self.threads < 2:
            raise ConfigError(
                f"{self.threads} chunks of {n} points would leave a chunk "
                "with fewer than 2 points"
            )
        if 3.0 * self.ppx > n - 1:
            raise ConfigError(
                f"3 * ppx = {3.0 * self.ppx:.6g} exceeds n - 1 = {n - 1}"
            )


@dataclass
class EpochSchedule:
    """Who owns which chunk, and in which layer slot, for one epoch."""

    epoch: int
    z: int  # thread count
    l: int  # layer count
    perm: np.ndarray    # (n,) shuffled point ids
    bounds: np.ndarray  # (z + 1,) chunk boundaries into perm

    def chunk(self, c: int) -> np.ndarray:
        return self.perm[self.bounds[c]:self.bounds[c + 1]]

    def thread_members(self, t: int):
        """(global ids, layer slots) of thread t's points, chunk order.

        Thread t works chunks (t + j) mod z for j = 0..l-1, and slot j
        is the layer those points are read from and written back to.
        """
        ids = []
        slots = []
        for j in range(self.l):
            c = (t + j) % self.z
            members = self.chunk(c)
            ids.append(members)
            slots.append(np.full(members.shape[0], j, dtype=np.int64))
        return np.concatenate(ids), np.concatenate(slots)

    def slot_of_chunk(self, c: int, t: int) -> int:
        """Layer slot chunk c occupies inside thread t."""
        return (c - t) % self.z


def make_epoch_schedule(
    n: int, cfg: RunConfig, epoch: int, stream: RngStream
) -> EpochSchedule:
    """Shuffle the points of one epoch into near-equal chunks."""
    z = cfg.threads
    perm = stream.substream("shuffle", epoch).permutation(n).astype(np.int64)
    base = n // z
    rem = n % z
    sizes = np.full(z, base, dtype=np.int64)
    sizes[:rem] += 1
    bounds = np.zeros(z + 1, dtype=np.int64)
    np.cumsum(sizes, out=bounds[1:])
    return EpochSchedule(epoch=epoch, z=z, l=cfg.layers, perm=perm, bounds=bounds)


@dataclass
class EpochResult:
    """What one worker hands back at the epoch barrier."""

    thread: int
    members: np.ndarray
    slots: np.ndarray
    y: np.ndarray
    cost_before: float
    cost_after: float
    z_estimated: bool
    n_isolated: int
    diag: Optional[np.ndarray]


@dataclass
class EmbeddingLayers:
    """A run's output: every layer plus the cost/timing record.

    costs[0] holds the per-thread pseudo-normalized costs at the random
    init (epoch 0 of the trace); costs[e] for e >= 1 holds them after
    epoch e.  The global cost of an epoch is their arithmetic mean.
    """

    positions: np.ndarray        # (layers, n, 2)
    costs: np.ndarray            # (epochs + 1, threads)
    epoch_seconds: np.ndarray    # (epochs,)
    pooling_seconds: np.ndarray  # (epochs,)
    z_estimated: bool
    meta: dict = field(default_factory=dict)
    debug_trace: Optional[np.ndarray] = None

    @property
    def layers(self) -> int:
        return self.positions.shape[0]

    @property
    def n(self) -> int:
        return self.positions.shape[1]

    @property
    def canonical(self) -> np.ndarray:
        """Layer 1, the one reported and evaluated by default."""
        return self.positions[0]

    @property
    def global_costs(self) -> np.ndarray:
        return self.costs.mean(axis=1)


def _resolve_pool_width(pool_width: Optional[int]) -> int:
    if pool_width is None:
        env = os.environ.get("PTSNE_POOL_WIDTH")
        if env is not None:
            try:
                pool_width = int(env)
            except ValueError as exc:
                raise ConfigError(
                    f"PTSNE_POOL_WIDTH must be an integer, got {env!r}"
                ) from exc
        else:
            pool_width = os.cpu_count() or 1
    if pool_width < 1:
        raise ConfigError(f"pool width must be >= 1, got {pool_width}")
    return pool_width


def _epoch_task(
    index: NeighborIndex,
    thread: int,
    members: np.ndarray,
    slots: np.ndarray,
    y: np.ndarray,
    mu_arr: np.ndarray,
    theta: float,
    collect_diag: bool,
) -> EpochResult:
    aff = partial_joint_affinities(members, index)
    prob = PartialProblem.fresh(members, slots, aff, y)
    cost_before, est0 = partial_cost(aff, prob.y, theta)
    diag = run_iterations(prob, mu_arr, theta, collect_diag=collect_diag)
    cost_after, est1 = partial_cost(aff, prob.y, theta)
    return EpochResult(
        thread=thread,
        members=members,
        slots=slots,
        y=prob.y,
        cost_before=cost_before,
        cost_after=cost_after,
        z_estimated=est0 or est1,
        n_isolated=aff.n_isolated,
        diag=diag,
    )


def pool_solutions(
    results: list[EpochResult], sched: EpochSchedule, positions: np.ndarray
) -> None:
    """Write every worker's chunks back into their layers, exactly once."""
    if len(results) != sched.z:
        raise IncompleteEpoch(
            f"epoch {sched.epoch}: {len(results)} of {sched.z} threads reported"
        )
    l, n, _ = positions.shape
    written = np.zeros((l, n), dtype=bool)
    for r in results:
        if np.any(written[r.slots, r.members]):
            raise IncompleteEpoch(
                f"epoch {sched.epoch}: thread {r.thread} overwrote a slot"
            )
        written[r.slots, r.members] = True
        positions[r.slots, r.members] = r.y
    if not written.all():
        raise IncompleteEpoch(
            f"epoch {sched.epoch}: {int((~written).sum())} layer slots not written"
        )


def run_ptsne(
    data: DataSet,
    cfg: RunConfig,
    *,
    index: Optional[NeighborIndex] = None,
    pool_width: Optional[int] = None,
    debug_thread: Optional[int] = None,
) -> EmbeddingLayers:
    """Run the full chunk-and-mix descent and return all layers."""
    n = data.n
    cfg.validate(n)
    if debug_thread is not None and not 0 <= debug_thread < cfg.threads:
        raise ConfigError(
            f"debug thread {debug_thread} out of range for {cfg.threads} threads"
        )
    if index is None:
        index = build_neighbor_index(data, cfg.ppx, cfg.tol, cfg.max_iter)
    epochs = cfg.epochs if cfg.epochs is not None else epoch_count(n)
    nu_nom = cfg.nu(n)
    iters = cfg.iters if cfg.iters is not None else iters_per_epoch(max(nu_nom, 2))
    width = _resolve_pool_width(pool_width)
    stream = RngStream(cfg.seed)

    y0 = init_embedding(n, stream.substream("init"))
    positions = np.repeat(y0[np.newaxis, :, :], cfg.layers, axis=0)

    costs = np.zeros((epochs + 1, cfg.threads), dtype=np.float64)
    epoch_seconds = np.zeros(epochs, dtype=np.float64)
    pooling_seconds = np.zeros(epochs, dtype=np.float64)
    z_estimated = False
    n_isolated_max = 0
    debug_rows = []

    with ThreadPoolExecutor(max_workers=width) as pool:
        for e in range(epochs):
            t_start = time.perf_counter()
            sched = make_epoch_schedule(n, cfg, e, stream)
            mu_e = momentum(e, epochs) if cfg.use_momentum else 0.0
            mu_arr = np.full(iters, mu_e, dtype=np.float64)
            futures = []
            for t in range(cfg.threads):
                members, slots = sched.thread_members(t)
                snapshot = positions[slots, members]
                futures.append(
                    pool.submit(
                        _epoch_task, index, t, members, slots, snapshot,
                        mu_arr, cfg.theta, debug_thread == t,
                    )
                )
            t_sched = time.perf_counter()
            results = []
            for t, fut in enumerate(futures):
                try:
                    results.append(fut.result())
                except NonFiniteEmbedding as exc:
                    raise NonFiniteEmbedding(
                        thread=t, iteration=exc.iteration
                    ) from exc
                except PtsneError:
                    raise
                except Exception as exc:  # noqa: BLE001
                    raise WorkerFailure(thread=t, cause=exc) from exc
            t_joined = time.perf_counter()
            pool_solutions(results, sched, positions)
            for r in results:
                costs[e + 1, r.thread] = r.cost_after
                if e == 0:
                    costs[0, r.thread] = r.cost_before
                z_estimated = z_estimated or r.z_estimated
                n_isolated_max = max(n_isolated_max, r.n_isolated)
                if r.diag is not None:
                    debug_rows.append(r.diag)
            t_end = time.perf_counter()
            epoch_seconds[e] = t_end - t_start
            pooling_seconds[e] = (t_sched - t_start) + (t_end - t_joined)

    meta = {
        "n": n,
        "m": data.m,
        "ppx": cfg.ppx,
        "threads": cfg.threads,
        "layers": cfg.layers,
        "rho": cfg.rho,
        "nu": nu_nom,
        "theta": cfg.theta,
        "epochs": epochs,
        "iters": iters,
        "seed": cfg.seed,
        "momentum": cfg.use_momentum,
        "exaggeration": cfg.exaggeration,
        "pool_width": width,
        "k": index.k,
        "n_isolated_max": n_isolated_max,
    }
    return EmbeddingLayers(
        positions=positions,
        costs=costs,
        epoch_seconds=epoch_seconds,
        pooling_seconds=pooling_seconds,
        z_estimated=z_estimated,
        meta=meta,
        debug_trace=np.vstack(debug_rows) if debug_rows else None,
    )


def refine(
    data: DataSet,
    init: EmbeddingLayers | np.ndarray,
    low_ppx: float,
    extra_iters: int,
    *,
    theta: float = 0.5,
    use_momentum: bool = True,
    index: Optional[NeighborIndex] = None,
    tol: float = 1e-5,
    max_iter: int = 200,
) -> EmbeddingLayers:
    """Polish a finished embedding with full-data iterations at low ppx.

    Runs one single-thread partial problem over all points, starting
    from layer 1 of ``init``, with momentum decaying per iteration.
    extra_iters = 0 returns the input positions unchanged (bitwise).
    """
    y_in = init.canonical if isinstance(init, EmbeddingLayers) else init
    y = np.ascontiguousarray(y_in, dtype=np.float64).copy()
    n = data.n
    if y.shape != (n, 2):
        raise ConfigError(
            f"init positions have shape {y.shape}, expected ({n}, 2)"
        )
    if extra_iters < 0:
        raise ConfigError("extra_iters must be >= 0")
    if low_ppx <= 1.0:
        raise ConfigError(f"perplexity must exceed 1, got {low_ppx}")
    if index is None:
        index = build_neighbor_index(data, low_ppx, tol, max_iter)
    members = np.arange(n, dtype=np.int64)
    aff = partial_joint_affinities(members, index)
    prob = PartialProblem.fresh(
        members, np.zeros(n, dtype=np.int64), aff, y
    )
    t_start = time.perf_counter()
    cost_before, est0 = partial_cost(aff, prob.y, theta)
    if extra_iters > 0:
        ts = np.arange(extra_iters, dtype=np.float64)
        mu_arr = (
            0.8 * (1.0 - ts / extra_iters) ** 2
            if use_momentum
            else np.zeros(extra_iters)
        )
        run_iterations(prob, mu_arr, theta)
    cost_after, est1 = partial_cost(aff, prob.y, theta)
    elapsed = time.perf_counter() - t_start

    meta = {
        "n": n,
        "m": data.m,
        "ppx": low_ppx,
        "threads": 1,
        "layers": 1,
        "rho": 1.0,
        "nu": n,
        "theta": theta,
        "epochs": 1,
        "iters": extra_iters,
        "seed": None,
        "momentum": use_momentum,
        "exaggeration": 1.0,
        "pool_width": 1,
        "k": index.k,
        "n_isolated_max": aff.n_isolated,
    }
    return EmbeddingLayers(
        positions=prob.y[np.newaxis, :, :],
        costs=np.array([[cost_before], [cost_after]]),
        epoch_seconds=np.array([elapsed]),
        pooling_seconds=np.array([0.0]),
        z_estimated=est0 or est1,
        meta=meta,
    )
