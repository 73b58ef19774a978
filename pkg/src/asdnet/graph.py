"""Graph primitives shared by the pooling, population and GCN code.

Adjacency is stored in coordinate form, sorted by (row, col), so every
reduction walks the entries in the same order and results are reproducible
bit for bit. All arithmetic is float64.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np

#: Bit generator behind every random stream in the package.
RNG_ALGORITHM = "PCG64"


@dataclass(frozen=True)
class AdjacencyMatrix:
    """Sparse weighted adjacency in sorted coordinate form.

    For undirected graphs both (i, j) and (j, i) are stored with equal
    weight; a self-loop is stored once.
    """

    n: int
    rows: np.ndarray
    cols: np.ndarray
    weights: np.ndarray
    directed: bool = False
    _dense: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        rows = np.asarray(self.rows, dtype=np.int64).ravel()
        cols = np.asarray(self.cols, dtype=np.int64).ravel()
        weights = np.asarray(self.weights, dtype=np.float64).ravel()
        if not (rows.shape == cols.shape == weights.shape):
            raise ValueError("rows, cols and weights must have equal length")
        if self.n < 0:
            raise ValueError("node count must be non-negative")
        if rows.size:
            if rows.min() < 0 or cols.min() < 0 or rows.max() >= self.n or cols.max() >= self.n:
                raise ValueError(f"entry index out of range for n={self.n}")
        if not np.all(np.isfinite(weights)) or np.any(weights < 0):
            raise ValueError("weights must be finite and non-negative")
        order = np.lexsort((cols, rows))
        rows, cols, weights = rows[order], cols[order], weights[order]
        if rows.size > 1:
            dup = (rows[1:] == rows[:-1]) & (cols[1:] == cols[:-1])
            if np.any(dup):
                raise ValueError("duplicate (i, j) entries")
        for arr in (rows, cols, weights):
            arr.setflags(write=False)
        object.__setattr__(self, "rows", rows)
        object.__setattr__(self, "cols", cols)
        object.__setattr__(self, "weights", weights)
        if not self.directed:
            dense = self.to_dense()
            if not np.array_equal(dense, dense.T):
                raise ValueError("undirected adjacency must be symmetric")

    @classmethod
    def from_dense(cls, dense, directed: bool = False) -> "AdjacencyMatrix":
        dense = np.asarray(dense, dtype=np.float64)
        if dense.ndim != 2 or dense.shape[0] != dense.shape[1]:
            raise ValueError("dense adjacency must be square")
        rows, cols = np.nonzero(dense)
        return cls(dense.shape[0], rows, cols, dense[rows, cols], directed=directed)

    @classmethod
    def from_edges(cls, n: int, edges, weights=None, directed: bool = False) -> "AdjacencyMatrix":
        """Build from an edge list; undirected edges are mirrored."""
        edges = np.asarray(list(edges), dtype=np.int64).reshape(-1, 2)
        if weights is None:
            w = np.ones(len(edges))
        else:
            w = np.asarray(weights, dtype=np.float64).ravel()
        if directed:
            return cls(n, edges[:, 0], edges[:, 1], w, directed=True)
        i, j = edges[:, 0], edges[:, 1]
        off = i != j
        rows = np.concatenate([i, j[off]])
        cols = np.concatenate([j, i[off]])
        return cls(n, rows, cols, np.concatenate([w, w[off]]), directed=False)

    @classmethod
    def empty(cls, n: int, directed: bool = False) -> "AdjacencyMatrix":
        z = np.zeros(0, dtype=np.int64)
        return cls(n, z, z, np.zeros(0), directed=directed)

    @property
    def nnz(self) -> int:
        return int(self.rows.size)

    def edge_count(self) -> int:
        """Number of edges; undirected pairs and self-loops count once."""
        if self.directed:
            return self.nnz
        loops = int(np.count_nonzero(self.rows == self.cols))
        return (self.nnz + loops) // 2

    def to_dense(self) -> np.ndarray:
        if self._dense is None:
            dense = np.zeros((self.n, self.n))
            dense[self.rows, self.cols] = self.weights
            dense.setflags(write=False)
            object.__setattr__(self, "_dense", dense)
        return self._dense

    def weight(self, i: int, j: int) -> float:
        return float(self.to_dense()[i, j])

    def neighbors(self, i: int) -> np.ndarray:
        lo, hi = np.searchsorted(self.rows, [i, i + 1])
        return self.cols[lo:hi]

    def subgraph(self, nodes) -> "AdjacencyMatrix":
        """Induced subgraph, renumbered to the order of ``nodes``."""
        nodes = np.asarray(nodes, dtype=np.int64)
        return AdjacencyMatrix.from_dense(self.to_dense()[np.ix_(nodes, nodes)], directed=self.directed)


@dataclass(frozen=True)
class DegreeMatrix:
    diagonal: np.ndarray

    def to_dense(self) -> np.ndarray:
        return np.diag(self.diagonal)


def _row_sums(adj: AdjacencyMatrix) -> np.ndarray:
    out = np.zeros(adj.n)
    # entries are sorted by row, so this accumulates in a fixed order
    np.add.at(out, adj.rows, adj.weights)
    return out


def degree_matrix(adj: AdjacencyMatrix) -> DegreeMatrix:
    return DegreeMatrix(_row_sums(adj))


def normalized_adjacency(adj: AdjacencyMatrix) -> AdjacencyMatrix:
    """Symmetric renormalization D~^-1/2 (A + I) D~^-1/2 used by GCN layers."""
    if adj.directed:
        raise ValueError("normalized_adjacency requires an undirected graph")
    dense = adj.to_dense() + np.eye(adj.n)
    deg = dense.sum(axis=1)
    inv_sqrt = 1.0 / np.sqrt(deg)
    norm = inv_sqrt[:, None] * dense * inv_sqrt[None, :]
    # keep exact symmetry regardless of rounding in the products above
    norm = np.triu(norm) + np.triu(norm, 1).T
    return AdjacencyMatrix.from_dense(norm)


def normalized_adjacency_dense(dense: np.ndarray) -> np.ndarray:
    """Dense variant of :func:`normalized_adjacency` for training loops."""
    a = np.asarray(dense, dtype=np.float64) + np.eye(dense.shape[0])
    inv_sqrt = 1.0 / np.sqrt(a.sum(axis=1))
    norm = inv_sqrt[:, None] * a * inv_sqrt[None, :]
    return np.triu(norm) + np.triu(norm, 1).T


def neighbor_mean(adj: AdjacencyMatrix, feats) -> np.ndarray:
    """Row-normalized aggregation D^-1 A H; zero-degree rows give zeros."""
    feats = np.asarray(feats, dtype=np.float64)
    if feats.ndim != 2 or feats.shape[0] != adj.n:
        raise ValueError(f"feature matrix must have {adj.n} rows, got shape {feats.shape}")
    agg = np.zeros_like(feats)
    np.add.at(agg, adj.rows, adj.weights[:, None] * feats[adj.cols])
    deg = _row_sums(adj)
    out = np.zeros_like(feats)
    nz = deg > 0
    out[nz] = agg[nz] / deg[nz, None]
    return out


def check_features(feats, n: int | None = None) -> np.ndarray:
    feats = np.asarray(feats, dtype=np.float64)
    if feats.ndim != 2:
        raise ValueError(f"feature matrix must be 2-D, got shape {feats.shape}")
    if n is not None and feats.shape[0] != n:
        raise ValueError(f"feature matrix must have {n} rows, got {feats.shape[0]}")
    if not np.all(np.isfinite(feats)):
        raise ValueError("feature matrix contains non-finite values")
    return feats


def rng_stream(seed: int, *names) -> np.random.Generator:
    """Independent PCG64 stream derived from a base seed and a name path.

    Names are hashed with CRC32 so the same (seed, names) pair yields the
    same draws on every platform and Python version.
    """
    key = [int(seed) & 0xFFFFFFFFFFFFFFFF]
    for name in names:
        if isinstance(name, (int, np.integer)):
            key.append(int(name) & 0xFFFFFFFF)
        else:
            key.append(zlib.crc32(str(name).encode("utf-8")))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(key)))
