"""Unsupervised self-attention graph pooling.

Each layer scores nodes by how far their features sit from the mean of
their neighbours, keeps the top ``ceil(r * n)`` of them, and re-predicts
edges among the survivors from feature cosine similarity plus the current
edge weight, normalised row-wise with sparsemax. Nothing here is trained.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .graph import AdjacencyMatrix, check_features, degree_matrix


@dataclass(frozen=True)
class PoolingConfig:
    ratio: float = 0.05
    layers: int = 1
    hops: int = 2

    def __post_init__(self):
        if not (0.0 < self.ratio <= 1.0):
            raise ValueError(f"pooling ratio must lie in (0, 1], got {self.ratio}")
        if self.layers < 1:
            raise ValueError("pooling needs at least one layer")
        if self.hops != 2:
            raise ValueError("candidate radius is fixed at two hops")


@dataclass
class LayerTrace:
    scores: np.ndarray
    selected: np.ndarray  # original numbering


@dataclass
class PoolingResult:
    selected: np.ndarray
    pooled_adj: AdjacencyMatrix
    pooled_feats: np.ndarray
    layer_trace: list[LayerTrace] = field(default_factory=list)


@dataclass(frozen=True)
class SparseFeatureVector:
    total_len: int
    positions: np.ndarray
    values: np.ndarray

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.total_len)
        out[self.positions] = self.values
        return out


def information_score(adj: AdjacencyMatrix, feats) -> np.ndarray:
    """Row-wise L1 norm of (I - D^-1 A) H.

    Accumulated as sum_j w_ij (h_i - h_j) / d_i, which equals h_i minus the
    neighbour mean but is exactly zero when every neighbour equals h_i.
    Isolated nodes score |h_i|.
    """
    feats = check_features(feats, adj.n)
    deg = degree_matrix(adj).diagonal
    diff = np.zeros_like(feats)
    np.add.at(diff, adj.rows, adj.weights[:, None] * (feats[adj.rows] - feats[adj.cols]))
    out = np.where(deg[:, None] > 0, diff / np.where(deg > 0, deg, 1.0)[:, None], feats)
    return np.abs(out).sum(axis=1)


def keep_count(n: int, ratio: float) -> int:
    """ceil(ratio * n), robust to representation error (0.1 * 30 -> 3)."""
    return max(1, math.ceil(round(ratio * n, 9)))


def select_top_k(scores, ratio: float) -> np.ndarray:
    """Indices of the ceil(r*n) largest scores, ascending.

    Ties go to the lower index.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores must be finite")
    if not (0.0 < ratio <= 1.0):
        raise ValueError(f"ratio must lie in (0, 1], got {ratio}")
    k = keep_count(scores.size, ratio)
    order = np.lexsort((np.arange(scores.size), -scores))
    return np.sort(order[:k])


def _cosine_matrix(feats: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(feats, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    unit = feats / safe[:, None]
    cos = unit @ unit.T
    zero = norms == 0
    cos[zero, :] = 0.0
    cos[:, zero] = 0.0
    return cos


def edge_similarity(feats, adj: AdjacencyMatrix, p: int, q: int) -> float:
    """Cosine similarity of rows p and q plus the current edge weight A(p, q).

    A zero-norm row contributes a cosine term of 0.
    """
    feats = np.asarray(feats, dtype=np.float64)
    u, v = feats[p], feats[q]
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    cos = 0.0 if nu == 0 or nv == 0 else float(np.dot(u, v) / (nu * nv))
    return cos + adj.weight(p, q)


def sparsemax(z) -> np.ndarray:
    """Euclidean projection of ``z`` onto the probability simplex."""
    z = np.asarray(z, dtype=np.float64).ravel()
    if z.size == 0:
        raise ValueError("sparsemax needs at least one coordinate")
    if not np.all(np.isfinite(z)):
        raise ValueError("sparsemax input must be finite")
    zs = np.sort(z)[::-1]
    cssv = np.cumsum(zs)
    ks = np.arange(1, z.size + 1)
    support = 1.0 + ks * zs > cssv
    k = ks[support][-1]
    tau = (cssv[k - 1] - 1.0) / k
    return np.maximum(z - tau, 0.0)


def two_hop_reach(adj: AdjacencyMatrix) -> np.ndarray:
    """Boolean matrix: q reachable from p in at most two (out-)edges, or q == p."""
    r = adj.to_dense() > 0
    ri = r.astype(np.int64)
    return r | ((ri @ ri) > 0) | np.eye(adj.n, dtype=bool)


def predict_edges(feats, adj: AdjacencyMatrix, selected) -> AdjacencyMatrix:
    """Re-predict a directed adjacency among ``selected`` nodes.

    Candidates for row p are the selected nodes within two hops of p in
    ``adj`` plus p itself. Sparsemax runs over the candidates only and the
    self weight is dropped afterwards, so row sums are at most 1.
    """
    feats = check_features(feats, adj.n)
    selected = np.asarray(selected, dtype=np.int64)
    if selected.size == 0:
        raise ValueError("no nodes selected")
    reach = two_hop_reach(adj)[np.ix_(selected, selected)]
    sim = _cosine_matrix(feats[selected]) + adj.to_dense()[np.ix_(selected, selected)]
    k = selected.size
    rows, cols, weights = [], [], []
    for p in range(k):
        cand = np.flatnonzero(reach[p])
        w = sparsemax(sim[p, cand])
        keep = (w > 0) & (cand != p)
        rows.append(np.full(int(keep.sum()), p))
        cols.append(cand[keep])
        weights.append(w[keep])
    return AdjacencyMatrix(
        k,
        np.concatenate(rows),
        np.concatenate(cols),
        np.concatenate(weights),
        directed=True,
    )


def pool_graph(graph, cfg: PoolingConfig | None = None) -> PoolingResult:
    """Apply ``cfg.layers`` rounds of score -> select -> predict edges.

    ``graph`` needs ``feats`` (n x d) and ``adj`` attributes.
    """
    cfg = cfg or PoolingConfig()
    adj = graph.adj
    feats = check_features(graph.feats, adj.n)
    index = np.arange(adj.n)
    trace = []
    for _ in range(cfg.layers):
        scores = information_score(adj, feats)
        sel = select_top_k(scores, cfg.ratio)
        adj = predict_edges(feats, adj, sel)
        feats = feats[sel]
        index = index[sel]
        trace.append(LayerTrace(scores=scores, selected=index.copy()))
    return PoolingResult(selected=index, pooled_adj=adj, pooled_feats=feats, layer_trace=trace)


def sparse_flatten(res: PoolingResult, n_nodes: int, feat_dim: int) -> SparseFeatureVector:
    """Row-major flatten where only the blocks of selected nodes are stored."""
    sel = np.asarray(res.selected, dtype=np.int64)
    if res.pooled_feats.shape != (sel.size, feat_dim):
        raise ValueError("pooled features do not match selection and feat_dim")
    if sel.size and (sel.min() < 0 or sel.max() >= n_nodes):
        raise ValueError("selected index outside node range")
    positions = (sel[:, None] * feat_dim + np.arange(feat_dim)[None, :]).ravel()
    return SparseFeatureVector(n_nodes * feat_dim, positions, res.pooled_feats.ravel().copy())
