"""Datasets, deterministic RNG streams, synthetic generators and file IO.

Everything downstream (neighbor search, affinities, quality metrics)
computes squared Euclidean distances through the single compiled kernel
in this module, so dense and sparse inputs with equal row contents give
bit-identical distances regardless of how rows are blocked.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp
from numba import njit

from .errors import DataFormatError, SpecTooLarge

#: hard cap on dataset size accepted anywhere in the package
MAX_POINTS = 100_000

#: smallest dataset that makes sense to embed
MIN_POINTS = 4


# ---------------------------------------------------------------------------
# canonical squared-distance kernel
# ---------------------------------------------------------------------------

@njit(cache=True, nogil=True)
def _sqdist_block(a, b, out):
    """out[i, j] = sum_k (a[i, k] - b[j, k])^2, accumulated in index order.

    The fixed left-to-right accumulation makes the result independent of
    how callers block their rows, which is what guarantees bit-identical
    distances for dense and sparse storage of the same data.
    """
    na, m = a.shape
    nb = b.shape[0]
    for i in range(na):
        for j in range(nb):
            s = 0.0
            for k in range(m):
                d = a[i, k] - b[j, k]
                s += d * d
            out[i, j] = s


def sq_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """All-pairs squared Euclidean distances between two dense row blocks."""
    a = np.ascontiguousarray(a, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    out = np.empty((a.shape[0], b.shape[0]), dtype=np.float64)
    _sqdist_block(a, b, out)
    return out


# ---------------------------------------------------------------------------
# dataset container
# ---------------------------------------------------------------------------

class DataSet:
    """A feature matrix with dense or CSR sparse storage.

    Rows are points, columns are features.  Sparse storage is an
    implementation detail: any row can be densified, and all distance
    computations route through :func:`sq_distances`.
    """

    def __init__(self, values, column_names: Optional[Sequence[str]] = None):
        if sp.issparse(values):
            mat = values.tocsr().astype(np.float64)
            mat.sort_indices()
            self._values = mat
            self._sparse = True
        else:
            arr = np.ascontiguousarray(values, dtype=np.float64)
            if arr.ndim != 2:
                raise DataFormatError("dataset must be a 2-D matrix")
            self._values = arr
            self._sparse = False
        if self.n < MIN_POINTS:
            raise DataFormatError(
                f"dataset has {self.n} rows; at least {MIN_POINTS} required"
            )
        if self.n > MAX_POINTS:
            raise SpecTooLarge(
                f"dataset has {self.n} rows; cap is {MAX_POINTS}"
            )
        if self.m < 1:
            raise DataFormatError("dataset must have at least one feature")
        data = self._values.data if self._sparse else self._values
        if not np.all(np.isfinite(data)):
            raise DataFormatError("dataset contains NaN or Inf values")
        self.column_names = (
            list(column_names)
            if column_names is not None
            else [f"f{j}" for j in range(self.m)]
        )
        if len(self.column_names) != self.m:
            raise DataFormatError("column name count does not match features")

    @property
    def n(self) -> int:
        return self._values.shape[0]

    @property
    def m(self) -> int:
        return self._values.shape[1]

    @property
    def is_sparse(self) -> bool:
        return self._sparse

    @property
    def values(self):
        """Raw backing matrix (ndarray or scipy CSR)."""
        return self._values

    def row_block(self, lo: int, hi: int) -> np.ndarray:
        """Rows lo:hi as a dense contiguous float64 array."""
        if self._sparse:
            return self._values[lo:hi].toarray()
        return np.ascontiguousarray(self._values[lo:hi])

    def squared_distance(self, i: int, j: int) -> float:
        """Squared Euclidean distance between rows i and j."""
        a = self.row_block(i, i + 1)
        b = self.row_block(j, j + 1)
        return float(sq_distances(a, b)[0, 0])

    def sq_distance_matrix(self, block: int = 256) -> np.ndarray:
        """Full n-by-n squared distance matrix, computed block-wise."""
        n = self.n
        out = np.empty((n, n), dtype=np.float64)
        for lo in range(0, n, block):
            hi = min(lo + block, n)
            a = self.row_block(lo, hi)
            for lo2 in range(0, n, block):
                hi2 = min(lo2 + block, n)
                out[lo:hi, lo2:hi2] = sq_distances(a, self.row_block(lo2, hi2))
        return out


# ---------------------------------------------------------------------------
# deterministic RNG substreams
# ---------------------------------------------------------------------------

class RngStream:
    """Derives independent, reproducible generators from one master seed.

    Each (tag, epoch) pair maps to its own substream via a SHA-256 hash,
    so adding consumers never perturbs the draws seen by existing ones,
    and per-epoch shuffles are independent of everything else.
    """

    def __init__(self, master_seed: int):
        self.master_seed = int(master_seed)

    def seed_for(self, tag: str, epoch: int = 0) -> int:
        digest = hashlib.sha256(
            f"{self.master_seed}|{tag}|{epoch}".encode("utf-8")
        ).digest()
        return int.from_bytes(digest[:16], "little")

    def substream(self, tag: str, epoch: int = 0) -> np.random.Generator:
        return np.random.default_rng(
            np.random.SeedSequence(self.seed_for(tag, epoch))
        )


# ---------------------------------------------------------------------------
# synthetic generators
# ---------------------------------------------------------------------------

@dataclass
class SyntheticSpec:
    """Parameters for a synthetic dataset.

    kind is either ``"sierpinski-graph"`` (uses ``depth``) or
    ``"hierarchical-gaussian"`` (uses ``levels``, ``clusters``,
    ``points_per_leaf``, ``separation``, ``dim`` and ``seed``).
    """

    kind: str
    depth: int = 3
    levels: int = 2
    clusters: int = 2
    points_per_leaf: int = 100
    separation: float = 10.0
    dim: int = 8
    seed: int = 0


def sierpinski_node_count(depth: int) -> int:
    """Number of vertices of the order-``depth`` triangle graph."""
    return 3 * (3 ** (depth - 1) + 1) // 2


def _sierpinski_adjacency(depth: int):
    """Vertex coordinates and edge list of the order-``depth`` gasket.

    Vertices live on an integer triangular lattice so midpoint
    subdivision is exact; the unit is one edge of the finest triangles.
    """
    side = 2 ** (depth - 1)
    corners = ((0, 0), (side, 0), (0, side))
    edges = set()
    stack = [(corners[0], corners[1], corners[2], depth)]
    while stack:
        a, b, c, lvl = stack.pop()
        if lvl == 1:
            edges.add((a, b))
            edges.add((b, c))
            edges.add((a, c))
            continue
        mab = ((a[0] + b[0]) // 2, (a[1] + b[1]) // 2)
        mbc = ((b[0] + c[0]) // 2, (b[1] + c[1]) // 2)
        mac = ((a[0] + c[0]) // 2, (a[1] + c[1]) // 2)
        stack.append((a, mab, mac, lvl - 1))
        stack.append((mab, b, mbc, lvl - 1))
        stack.append((mac, mbc, c, lvl - 1))
    verts = sorted({v for e in edges for v in e})
    vid = {v: i for i, v in enumerate(verts)}
    pairs = sorted((vid[a], vid[b]) for a, b in edges)
    return verts, pairs


@njit(cache=True, nogil=True)
def _bfs_all_sources(indptr, indices, n):
    """Shortest-path hop counts between every vertex pair of a graph."""
    dist = np.full((n, n), -1.0)
    queue = np.empty(n, dtype=np.int64)
    for s in range(n):
        dist[s, s] = 0.0
        queue[0] = s
        head = 0
        tail = 1
        while head < tail:
            u = queue[head]
            head += 1
            du = dist[s, u]
            for e in range(indptr[u], indptr[u + 1]):
                v = indices[e]
                if dist[s, v] < 0.0:
                    dist[s, v] = du + 1.0
                    queue[tail] = v
                    tail += 1
    return dist


def make_sierpinski(depth: int) -> DataSet:
    """Sierpinski triangle graph of the given subdivision depth.

    Each point's feature vector holds its graph (hop) distance to every
    vertex, so the feature dimension equals the point count.
    """
    if depth < 1:
        raise DataFormatError("sierpinski depth must be >= 1")
    n = sierpinski_node_count(depth)
    if n > MAX_POINTS:
        raise SpecTooLarge(
            f"sierpinski-graph(depth={depth}) has {n} vertices; cap is {MAX_POINTS}"
        )
    _, pairs = _sierpinski_adjacency(depth)
    rows = np.empty(2 * len(pairs), dtype=np.int64)
    cols = np.empty(2 * len(pairs), dtype=np.int64)
    for t, (a, b) in enumerate(pairs):
        rows[2 * t] = a
        cols[2 * t] = b
        rows[2 * t + 1] = b
        cols[2 * t + 1] = a
    adj = sp.csr_matrix(
        (np.ones(rows.shape[0]), (rows, cols)), shape=(n, n)
    )
    adj.sort_indices()
    feats = _bfs_all_sources(
        adj.indptr.astype(np.int64), adj.indices.astype(np.int64), n
    )
    return DataSet(feats)


def make_hierarchical_gaussians(
    levels: int,
    clusters: int,
    points_per_leaf: int,
    separation: float = 10.0,
    dim: int = 8,
    seed: int = 0,
) -> DataSet:
    """Nested Gaussian clusters with scale ratio ``separation`` per level.

    Level L (outermost) cluster centers sit at radius separation**L from
    their parent, decreasing geometrically down to unit-sigma leaves, so
    the dataset has structure at ``levels + 1`` distinct scales.
    """
    if levels < 1 or clusters < 1 or points_per_leaf < 1:
        raise DataFormatError("levels, clusters and points_per_leaf must be >= 1")
    if separation <= 0:
        raise DataFormatError("separation must be positive")
    if dim < 1:
        raise DataFormatError("dim must be >= 1")
    n = clusters**levels * points_per_leaf
    if n > MAX_POINTS:
        raise SpecTooLarge(
            f"hierarchical-gaussian would have {n} points; cap is {MAX_POINTS}"
        )
    rng = RngStream(seed).substream("synthetic-gaussians")
    centers = [np.zeros(dim)]
    for lvl in range(levels):
        radius = float(separation) ** (levels - lvl)
        nxt = []
        for c in centers:
            for _ in range(clusters):
                u = rng.normal(size=dim)
                u /= max(np.linalg.norm(u), 1e-12)
                nxt.append(c + radius * u)
        centers = nxt
    blocks = [
        rng.normal(size=(points_per_leaf, dim)) + c for c in centers
    ]
    return DataSet(np.vstack(blocks))


def generate_synthetic(spec: SyntheticSpec) -> DataSet:
    """Build the dataset described by a :class:`SyntheticSpec`."""
    if spec.kind == "sierpinski-graph":
        return make_sierpinski(spec.depth)
    if spec.kind == "hierarchical-gaussian":
        return make_hierarchical_gaussians(
            spec.levels,
            spec.clusters,
            spec.points_per_leaf,
            spec.separation,
            spec.dim,
            spec.seed,
        )
    raise DataFormatError(f"unknown synthetic kind: {spec.kind!r}")


# ---------------------------------------------------------------------------
# file IO
# ---------------------------------------------------------------------------

def fmt_float(x: float) -> str:
    """Shortest round-trip decimal form; the one float format used in CSVs."""
    return repr(float(x))


def load_csv(path) -> DataSet:
    """Read a numeric CSV (UTF-8, comma separated, one header line)."""
    path = Path(path)
    try:
        with path.open("r", encoding="utf-8") as fh:
            header = fh.readline().strip()
            if not header:
                raise DataFormatError(f"{path}: empty file")
            names = [c.strip() for c in header.split(",")]
            data = np.loadtxt(fh, delimiter=",", ndmin=2, dtype=np.float64)
    except OSError as exc:
        raise DataFormatError(f"{path}: {exc}") from exc
    except ValueError as exc:
        raise DataFormatError(f"{path}: not a numeric CSV ({exc})") from exc
    if data.shape[1] != len(names):
        raise DataFormatError(
            f"{path}: header has {len(names)} columns, rows have {data.shape[1]}"
        )
    return DataSet(data, column_names=names)


_MM_BANNER = "%%matrixmarket matrix coordinate real general"


def load_matrix_market(path) -> DataSet:
    """Read a sparse matrix in MatrixMarket coordinate/real/general form."""
    from scipy.io import mmread

    path = Path(path)
    try:
        with path.open("r", encoding="utf-8") as fh:
            banner = fh.readline().strip().lower()
    except OSError as exc:
        raise DataFormatError(f"{path}: {exc}") from exc
    if banner != _MM_BANNER:
        raise DataFormatError(
            f"{path}: expected banner '{_MM_BANNER}', got {banner!r}"
        )
    try:
        mat = mmread(str(path))
    except Exception as exc:
        raise DataFormatError(f"{path}: MatrixMarket parse failed ({exc})") from exc
    return DataSet(sp.csr_matrix(mat))


def load_dataset(path) -> DataSet:
    """Dispatch on extension: .mtx/.mm -> MatrixMarket, else CSV."""
    path = Path(path)
    if path.suffix.lower() in (".mtx", ".mm"):
        return load_matrix_market(path)
    return load_csv(path)


def write_dataset_csv(ds: DataSet, path) -> None:
    """Write a dataset as the CSV dialect :func:`load_csv` reads back."""
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(ds.column_names) + "\n")
        for lo in range(0, ds.n, 512):
            block = ds.row_block(lo, min(lo + 512, ds.n))
            for row in block:
                fh.write(",".join(fmt_float(v) for v in row) + "\n")
