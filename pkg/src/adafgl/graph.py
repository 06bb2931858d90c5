"""Immutable CSR graphs, homophily metrics, propagation operators, SBM generator."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace

import numpy as np

from . import kernels


@dataclass(frozen=True)
class Graph:
    """Undirected graph in CSR form with features, labels and split masks.

    The adjacency stores each undirected edge as two directed arcs, has no
    self-loops, and neighbor lists are sorted. All arrays are read-only;
    derive modified graphs through the ``with_*`` helpers.
    """

    num_nodes: int
    indptr: np.ndarray
    indices: np.ndarray
    features: np.ndarray
    labels: np.ndarray
    train_mask: np.ndarray
    val_mask: np.ndarray
    test_mask: np.ndarray
    num_classes: int

    def __post_init__(self):
        n = self.num_nodes
        object.__setattr__(self, "indptr", _lock(np.asarray(self.indptr, dtype=np.int64)))
        object.__setattr__(self, "indices", _lock(np.asarray(self.indices, dtype=np.int64)))
        object.__setattr__(self, "features", _lock(np.asarray(self.features, dtype=np.float64)))
        object.__setattr__(self, "labels", _lock(np.asarray(self.labels, dtype=np.int64)))
        for name in ("train_mask", "val_mask", "test_mask"):
            object.__setattr__(self, name, _lock(np.asarray(getattr(self, name), dtype=bool)))

        if self.indptr.shape != (n + 1,) or self.indptr[0] != 0 or self.indptr[-1] != len(self.indices):
            raise ValueError("malformed CSR index pointer")
        if np.any(np.diff(self.indptr) < 0):
            raise ValueError("indptr must be non-decreasing")
        if self.features.shape[0] != n or self.labels.shape != (n,):
            raise ValueError("features/labels node count mismatch")
        for name in ("train_mask", "val_mask", "test_mask"):
            if getattr(self, name).shape != (n,):
                raise ValueError(f"{name} length mismatch")
        if self.indices.size and (self.indices.min() < 0 or self.indices.max() >= n):
            raise ValueError("edge endpoint out of range")
        if np.any(self.indices == np.repeat(np.arange(n), np.diff(self.indptr))):
            raise ValueError("self-loops are not stored")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError("label outside [0, num_classes)")
        if np.any(self.train_mask & self.val_mask) or np.any(self.train_mask & self.test_mask) or np.any(self.val_mask & self.test_mask):
            raise ValueError("train/val/test masks must be disjoint")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("features must be finite")
        if not _is_symmetric(self.indptr, self.indices, n):
            raise ValueError("adjacency must be symmetric")

    @property
    def num_edges(self) -> int:
        """Number of undirected edges (arcs / 2)."""
        return len(self.indices) // 2

    @property
    def degrees(self) -> np.ndarray:
        return np.diff(self.indptr)

    def neighbors(self, u: int) -> np.ndarray:
        return self.indices[self.indptr[u] : self.indptr[u + 1]]

    def edge_array(self) -> np.ndarray:
        """Canonical (m, 2) array of undirected edges with u < v, sorted."""
        rows = np.repeat(np.arange(self.num_nodes), self.degrees)
        keep = rows < self.indices
        return np.stack([rows[keep], self.indices[keep]], axis=1)

    def dense_adjacency(self) -> np.ndarray:
        a = np.zeros((self.num_nodes, self.num_nodes))
        rows = np.repeat(np.arange(self.num_nodes), self.degrees)
        a[rows, self.indices] = 1.0
        return a

    def with_masks(self, train: np.ndarray, val: np.ndarray, test: np.ndarray) -> "Graph":
        return replace(self, train_mask=train.copy(), val_mask=val.copy(), test_mask=test.copy())

    def with_features(self, features: np.ndarray) -> "Graph":
        return replace(self, features=features.copy())

    def with_edges(self, edges: np.ndarray) -> "Graph":
        indptr, indices = _edges_to_csr(self.num_nodes, edges)
        return replace(self, indptr=indptr, indices=indices)


def _lock(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr).copy()
    arr.setflags(write=False)
    return arr


def _is_symmetric(indptr, indices, n) -> bool:
    rows = np.repeat(np.arange(n), np.diff(indptr))
    fwd = np.lexsort((indices, rows))
    bwd = np.lexsort((rows, indices))
    return bool(np.array_equal(rows[fwd], indices[bwd]) and np.array_equal(indices[fwd], rows[bwd]))


def _edges_to_csr(num_nodes: int, edges: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Symmetrize, dedup, drop self-loops; return sorted CSR arrays."""
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    edges = edges[edges[:, 0] != edges[:, 1]]
    if edges.size:
        arcs = np.concatenate([edges, edges[:, ::-1]], axis=0)
        arcs = np.unique(arcs, axis=0)
        order = np.lexsort((arcs[:, 1], arcs[:, 0]))
        arcs = arcs[order]
        rows, cols = arcs[:, 0], arcs[:, 1]
    else:
        rows = cols = np.empty(0, dtype=np.int64)
    indptr = np.zeros(num_nodes + 1, dtype=np.int64)
    np.add.at(indptr, rows + 1, 1)
    np.cumsum(indptr, out=indptr)
    return indptr, cols


def from_edges(
    num_nodes: int,
    edges: np.ndarray,
    features: np.ndarray,
    labels: np.ndarray,
    num_classes: int | None = None,
    train_mask: np.ndarray | None = None,
    val_mask: np.ndarray | None = None,
    test_mask: np.ndarray | None = None,
) -> Graph:
    """Build a Graph from an edge list, canonicalizing duplicates and self-loops."""
    indptr, indices = _edges_to_csr(num_nodes, edges)
    labels = np.asarray(labels, dtype=np.int64)
    if num_classes is None:
        num_classes = int(labels.max()) + 1 if num_nodes else 0
    empty = np.zeros(num_nodes, dtype=bool)
    return Graph(
        num_nodes=num_nodes,
        indptr=indptr,
        indices=indices,
        features=np.asarray(features, dtype=np.float64),
        labels=labels,
        train_mask=empty if train_mask is None else train_mask,
        val_mask=empty if val_mask is None else val_mask,
        test_mask=empty if test_mask is None else test_mask,
        num_classes=num_classes,
    )


def induced_subgraph(g: Graph, nodes: np.ndarray) -> Graph:
    """Subgraph on `nodes` (their order defines local ids), intra edges only."""
    nodes = np.asarray(nodes, dtype=np.int64)
    local = np.full(g.num_nodes, -1, dtype=np.int64)
    local[nodes] = np.arange(len(nodes))
    edges = g.edge_array()
    keep = (local[edges[:, 0]] >= 0) & (local[edges[:, 1]] >= 0)
    sub_edges = local[edges[keep]]
    indptr, indices = _edges_to_csr(len(nodes), sub_edges)
    return Graph(
        num_nodes=len(nodes),
        indptr=indptr,
        indices=indices,
        features=g.features[nodes],
        labels=g.labels[nodes],
        train_mask=g.train_mask[nodes],
        val_mask=g.val_mask[nodes],
        test_mask=g.test_mask[nodes],
        num_classes=g.num_classes,
    )


def node_homophily(g: Graph) -> float:
    """Mean over non-isolated nodes of the same-label neighbor fraction."""
    deg = g.degrees
    if g.num_edges == 0:
        warnings.warn("node_homophily on an edgeless graph is 0 by convention")
        return 0.0
    same = kernels.same_label_counts(g.indptr, g.indices, g.labels)
    active = deg > 0
    return float(np.mean(same[active] / deg[active]))


def edge_homophily(g: Graph) -> float:
    """Fraction of undirected edges whose endpoints share a label."""
    if g.num_edges == 0:
        raise ValueError("edge_homophily undefined for a graph with no edges")
    same = kernels.same_label_counts(g.indptr, g.indices, g.labels)
    return float(same.sum() / (2 * g.num_edges))


def normalized_adjacency(g: Graph, r: float = 0.5) -> np.ndarray:
    """Dense D^(r-1) (A + I) D^(-r); r=1/2 symmetric, r=0 row-, r=1 column-stochastic."""
    if not 0.0 <= r <= 1.0:
        raise ValueError("normalization exponent must lie in [0, 1]")
    a_hat = g.dense_adjacency()
    np.fill_diagonal(a_hat, 1.0)
    d = a_hat.sum(axis=1)
    return (d ** (r - 1.0))[:, None] * a_hat * (d**-r)[None, :]


def uniform_distribution(n: int, num_classes: int) -> np.ndarray:
    return np.full((n, num_classes), 1.0 / num_classes)


def label_propagation(g: Graph, init: np.ndarray, kappa: float, steps: int) -> np.ndarray:
    """Iterate init-anchored neighbor averaging with self-looped degree weights.

    Each step computes kappa * init + (1 - kappa) * S @ prev with
    S_uv = (d_u d_v)^(-1/2) over neighbors (d = degree + 1), then renormalizes
    rows to sum one. Rows that end up all-zero fall back to uniform.
    """
    if not 0.0 <= kappa <= 1.0:
        raise ValueError("kappa must lie in [0, 1]")
    init = np.asarray(init, dtype=np.float64)
    if init.shape != (g.num_nodes, g.num_classes):
        raise ValueError("init shape must be (num_nodes, num_classes)")
    if np.any(init < 0) or not np.allclose(init.sum(axis=1), 1.0, atol=1e-8):
        raise ValueError("init must be row-stochastic")
    inv_sqrt = 1.0 / np.sqrt(g.degrees.astype(np.float64) + 1.0)
    out = init.copy()
    for _ in range(steps):
        prop = kernels.lp_propagate(g.indptr, g.indices, inv_sqrt, out)
        out = kappa * init + (1.0 - kappa) * prop
        sums = out.sum(axis=1)
        dead = sums <= 0.0
        if np.any(dead):
            out[dead] = 1.0 / g.num_classes
            sums[dead] = 1.0
        out /= sums[:, None]
    return out


def sbm_generate(
    n: int,
    classes: int,
    p_in: float,
    p_out: float,
    f: int,
    seed: int,
    feature_noise: float = 1.0,
) -> Graph:
    """Stochastic block model with balanced contiguous classes and Gaussian features."""
    if n < classes:
        raise ValueError("need at least one node per class")
    for name, p in (("p_in", p_in), ("p_out", p_out)):
        if not 0.0 <= p <= 1.0:
            raise ValueError(f"{name} must be a probability")
    rng = np.random.default_rng(seed)
    labels = np.sort(np.arange(n) % classes)
    same = labels[:, None] == labels[None, :]
    prob = np.where(same, p_in, p_out)
    draw = rng.random((n, n))
    upper = np.triu(draw < prob, k=1)
    rows, cols = np.nonzero(upper)
    edges = np.stack([rows, cols], axis=1)
    means = rng.standard_normal((classes, f))
    features = means[labels] + feature_noise * rng.standard_normal((n, f))
    return from_edges(n, edges, features, labels, num_classes=classes)
