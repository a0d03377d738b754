"""Sparse graph representation, Laplacians and block-diagonal batching.

Adjacency and Laplacian operators are stored as canonical
``scipy.sparse.csr_matrix`` objects (sorted column indices, no duplicate
entries).  Canonical CSR makes the sparse-dense product accumulate each
row in ascending column order, so results are bit-reproducible.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Optional, Sequence

import numpy as np
import scipy.sparse as sp

SparseMatrix = sp.csr_matrix


class GraphError(ValueError):
    """Raised for structurally invalid graphs or mismatched operands."""


def _canonical(m: sp.spmatrix) -> sp.csr_matrix:
    m = sp.csr_matrix(m, dtype=np.float64)
    m.sum_duplicates()
    m.eliminate_zeros()
    m.sort_indices()
    return m


@dataclass(frozen=True, eq=False)
class Graph:
    """Undirected weighted graph with node features and labels.

    ``features`` is either an integer vector of categorical codes (one per
    node) or a float matrix of shape ``(n_nodes, d)``.
    """

    n_nodes: int
    indptr: np.ndarray
    indices: np.ndarray
    weights: np.ndarray
    features: Optional[np.ndarray] = None
    node_labels: Optional[np.ndarray] = None
    graph_label: Any = None
    graph_id: Any = None

    @property
    def adjacency(self) -> sp.csr_matrix:
        return sp.csr_matrix(
            (self.weights, self.indices, self.indptr), shape=(self.n_nodes, self.n_nodes)
        )

    @property
    def n_edges(self) -> int:
        """Number of undirected edges."""
        return len(self.indices) // 2

    @property
    def feature_kind(self) -> str:
        if self.features is None:
            return "none"
        return "categorical" if self.features.ndim == 1 else "dense"

    def edge_list(self) -> np.ndarray:
        """Undirected edges as an ``(m, 2)`` array with ``u < v``."""
        rows = np.repeat(np.arange(self.n_nodes), np.diff(self.indptr))
        keep = rows < self.indices
        return np.stack([rows[keep], self.indices[keep]], axis=1)

    def edge_weights(self) -> np.ndarray:
        rows = np.repeat(np.arange(self.n_nodes), np.diff(self.indptr))
        return self.weights[rows < self.indices]


def build_graph(
    n: int,
    edges: Sequence,
    weights: Optional[Sequence[float]] = None,
    features=None,
    node_labels=None,
    graph_label=None,
    graph_id=None,
) -> Graph:
    """Build a symmetric CSR graph from an undirected edge list.

    Each pair ``(u, v)`` is stored in both directions.  Repeated pairs are
    collapsed by summing their weights.
    """
    n = int(n)
    if n < 0:
        raise GraphError(f"negative node count {n}")
    e = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    w = np.ones(len(e)) if weights is None else np.asarray(weights, dtype=np.float64)
    if w.shape != (len(e),):
        raise GraphError(f"got {len(w)} weights for {len(e)} edges")
    if len(e):
        if e.min() < 0 or e.max() >= n:
            raise GraphError(f"edge endpoint out of range for n={n}")
        loops = e[:, 0] == e[:, 1]
        if loops.any():
            u = int(e[loops][0, 0])
            raise GraphError(f"self-loop at node {u}")
    if not np.all(np.isfinite(w)) or (w < 0).any():
        raise GraphError("edge weights must be finite and non-negative")

    rows = np.concatenate([e[:, 0], e[:, 1]])
    cols = np.concatenate([e[:, 1], e[:, 0]])
    a = _canonical(sp.coo_matrix((np.concatenate([w, w]), (rows, cols)), shape=(n, n)))

    if features is not None:
        features = np.asarray(features)
        if features.ndim == 1:
            features = features.astype(np.int64)
        elif features.ndim == 2:
            features = features.astype(np.float64)
        else:
            raise GraphError("features must be a code vector or a 2-D matrix")
        if features.shape[0] != n:
            raise GraphError(f"features have {features.shape[0]} rows, expected {n}")
    if node_labels is not None:
        node_labels = np.asarray(node_labels)
        if node_labels.shape[0] != n:
            raise GraphError(f"node_labels has {node_labels.shape[0]} entries, expected {n}")

    return Graph(
        n_nodes=n,
        indptr=a.indptr.astype(np.int64),
        indices=a.indices.astype(np.int64),
        weights=a.data,
        features=features,
        node_labels=node_labels,
        graph_label=graph_label,
        graph_id=graph_id,
    )


def graph_from_adjacency(a, **kwargs) -> Graph:
    """Build a graph from a symmetric (dense or sparse) adjacency matrix."""
    a = sp.coo_matrix(a)
    a.eliminate_zeros()
    if (abs(a - a.T) > 0).nnz:
        raise GraphError("adjacency is not symmetric")
    if (a.row == a.col).any():
        raise GraphError("adjacency has non-zero diagonal")
    keep = a.row < a.col
    edges = np.stack([a.row[keep], a.col[keep]], axis=1)
    return build_graph(a.shape[0], edges, a.data[keep], **kwargs)


def degree_vector(g: Graph) -> np.ndarray:
    rows = np.repeat(np.arange(g.n_nodes), np.diff(g.indptr))
    return np.bincount(rows, weights=g.weights, minlength=g.n_nodes).astype(np.float64)


def _inv_sqrt_degree(g: Graph) -> np.ndarray:
    d = degree_vector(g)
    out = np.zeros_like(d)
    pos = d > 0
    out[pos] = 1.0 / np.sqrt(d[pos])
    return out


def normalized_laplacian(g: Graph) -> sp.csr_matrix:
    """Return ``I - D^{-1/2} A D^{-1/2}``.

    Degree-zero nodes get ``D^{-1/2} = 0``, so their row is the identity row.
    """
    s = sp.diags(_inv_sqrt_degree(g))
    return _canonical(sp.identity(g.n_nodes, format="csr") - s @ g.adjacency @ s)


@dataclass(frozen=True, eq=False)
class ScaledLaplacian:
    """The rescaled operator ``(2 / lambda_max) * L - I``."""

    matrix: sp.csr_matrix
    lambda_max: float = 2.0

    @property
    def n(self) -> int:
        return self.matrix.shape[0]


def scaled_laplacian(lap: sp.spmatrix, lambda_max: float = 2.0) -> ScaledLaplacian:
    if not lambda_max > 0:
        raise GraphError(f"lambda_max must be positive, got {lambda_max}")
    n = lap.shape[0]
    if lambda_max == 2.0:
        m = lap - sp.identity(n, format="csr")
    else:
        m = (2.0 / lambda_max) * lap - sp.identity(n, format="csr")
    return ScaledLaplacian(_canonical(m), float(lambda_max))


def gcn_propagation(g: Graph) -> sp.csr_matrix:
    """Self-loop renormalized propagation ``D~^{-1/2} (A + I) D~^{-1/2}``."""
    a = g.adjacency + sp.identity(g.n_nodes, format="csr")
    d = np.asarray(a.sum(axis=1)).ravel()
    s = sp.diags(1.0 / np.sqrt(d))
    return _canonical(s @ a @ s)


def spmm(m: sp.spmatrix, x: np.ndarray) -> np.ndarray:
    """Sparse-dense product ``m @ x``.

    scipy's CSR kernel accumulates each output row serially over the
    row's stored entries; with canonical CSR that is ascending column order.
    """
    if isinstance(m, ScaledLaplacian):
        m = m.matrix
    x = np.asarray(x)
    if x.shape[0] != m.shape[1]:
        raise GraphError(f"dimension mismatch: matrix {m.shape} vs operand {x.shape}")
    return m @ x


def estimate_lambda_max(
    lap: sp.spmatrix, iters: int = 1000, tol: float = 1e-10, seed: int = 0
) -> float:
    """Largest eigenvalue of a symmetric PSD operator by power iteration."""
    n = lap.shape[0]
    v = np.random.default_rng(seed).standard_normal(n)
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(iters):
        w = lap @ v
        new = float(v @ w)
        nrm = np.linalg.norm(w)
        if nrm == 0.0:
            return 0.0
        v = w / nrm
        if abs(new - lam) <= tol * max(abs(new), 1.0):
            return new
        lam = new
    return lam


@dataclass(frozen=True, eq=False)
class BatchedGraph:
    """Block-diagonal union of member graphs.

    Member ``i`` owns nodes ``offsets[i]:offsets[i + 1]``.  The Laplacian
    operators are computed once on first use and cached.
    """

    graph: Graph
    offsets: np.ndarray
    members: tuple = ()
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def n_graphs(self) -> int:
        return len(self.offsets) - 1

    @property
    def n_nodes(self) -> int:
        return self.graph.n_nodes

    def node_graph_index(self) -> np.ndarray:
        return np.repeat(np.arange(self.n_graphs), np.diff(self.offsets))

    def scaled_laplacian(self, lambda_max: float = 2.0) -> ScaledLaplacian:
        key = ("scaled", lambda_max)
        if key not in self._cache:
            self._cache[key] = scaled_laplacian(normalized_laplacian(self.graph), lambda_max)
        return self._cache[key]

    def gcn_propagation(self) -> sp.csr_matrix:
        if "gcn" not in self._cache:
            self._cache["gcn"] = gcn_propagation(self.graph)
        return self._cache["gcn"]


def batch(graphs: Sequence[Graph]) -> BatchedGraph:
    graphs = list(graphs)
    if not graphs:
        raise GraphError("cannot batch an empty list of graphs")
    kinds = {g.feature_kind for g in graphs}
    if len(kinds) > 1:
        raise GraphError(f"mixed feature kinds in batch: {sorted(kinds)}")

    sizes = np.array([g.n_nodes for g in graphs], dtype=np.int64)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    indptr = [np.zeros(1, dtype=np.int64)]
    indices, weights = [], []
    nnz = 0
    for g, off in zip(graphs, offsets[:-1]):
        indptr.append(g.indptr[1:] + nnz)
        indices.append(g.indices + off)
        weights.append(g.weights)
        nnz += len(g.indices)

    features = None
    if kinds != {"none"}:
        features = np.concatenate([g.features for g in graphs], axis=0)
    node_labels = None
    if all(g.node_labels is not None for g in graphs):
        node_labels = np.concatenate([g.node_labels for g in graphs])
    graph_label = None
    if all(g.graph_label is not None for g in graphs):
        graph_label = np.array([g.graph_label for g in graphs])

    union = Graph(
        n_nodes=int(offsets[-1]),
        indptr=np.concatenate(indptr),
        indices=np.concatenate(indices),
        weights=np.concatenate(weights),
        features=features,
        node_labels=node_labels,
        graph_label=graph_label,
        graph_id=tuple(g.graph_id for g in graphs),
    )
    return BatchedGraph(union, offsets, tuple(graphs))
