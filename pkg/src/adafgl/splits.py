"""Federated task generation: community split and structure Non-iid split."""

from __future__ import annotations

import math
import warnings
from collections import deque
from dataclasses import dataclass, field, replace

import numpy as np

from . import kernels
from .graph import Graph, induced_subgraph


@dataclass(frozen=True)
class InjectionRecord:
    client_id: int
    mode: str  # "homo" | "hetero" | "none"
    edges_added: int
    shortfall: int = 0


@dataclass(frozen=True)
class ClientSubgraph:
    client_id: int
    graph: Graph
    global_ids: np.ndarray

    def __post_init__(self):
        ids = np.asarray(self.global_ids, dtype=np.int64).copy()
        ids.setflags(write=False)
        object.__setattr__(self, "global_ids", ids)
        if len(ids) != self.graph.num_nodes:
            raise ValueError("global id map must cover every local node")
        if len(np.unique(ids)) != len(ids):
            raise ValueError("global id map must be injective")


@dataclass(frozen=True)
class FederatedTask:
    clients: tuple[ClientSubgraph, ...]
    strategy: str  # "community" | "structure-noniid"
    seed: int
    injection_log: tuple[InjectionRecord, ...]
    p_s: float | None = None
    ratio: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "clients", tuple(self.clients))
        object.__setattr__(self, "injection_log", tuple(self.injection_log))
        seen: set[int] = set()
        for sub in self.clients:
            ids = set(int(i) for i in sub.global_ids)
            if seen & ids:
                raise ValueError("client node sets must be disjoint")
            seen |= ids

    @property
    def num_clients(self) -> int:
        return len(self.clients)


# ---------------------------------------------------------------------------
# Louvain
# ---------------------------------------------------------------------------


def _modularity(indptr, indices, weights, comm, degree, m2) -> float:
    rows = np.repeat(np.arange(indptr.shape[0] - 1), np.diff(indptr))
    internal = float(weights[comm[rows] == comm[indices]].sum())
    sigma = np.bincount(comm, weights=degree, minlength=int(comm.max()) + 1)
    return internal / m2 - float(((sigma / m2) ** 2).sum())


def _relabel_first_occurrence(comm: np.ndarray) -> np.ndarray:
    mapping: dict[int, int] = {}
    out = np.empty_like(comm)
    for i, c in enumerate(comm):
        out[i] = mapping.setdefault(int(c), len(mapping))
    return out


def _coarsen(indptr, indices, weights, comm, num_comms):
    rows = np.repeat(np.arange(indptr.shape[0] - 1), np.diff(indptr))
    key = comm[rows].astype(np.int64) * num_comms + comm[indices]
    uniq, inverse = np.unique(key, return_inverse=True)
    agg = np.bincount(inverse, weights=weights)
    new_rows = (uniq // num_comms).astype(np.int64)
    new_cols = (uniq % num_comms).astype(np.int64)
    new_indptr = np.zeros(num_comms + 1, dtype=np.int64)
    np.add.at(new_indptr, new_rows + 1, 1)
    np.cumsum(new_indptr, out=new_indptr)
    return new_indptr, new_cols, agg


def louvain(g: Graph, seed: int) -> np.ndarray:
    """Greedy modularity communities, coarsening until the gain falls below 1e-7.

    Deterministic for a fixed seed: the seed shuffles node visit order per
    level. Returns community ids (0..K-1, numbered by first occurrence).
    """
    n = g.num_nodes
    if g.num_edges == 0:
        return np.arange(n, dtype=np.int64)
    rng = np.random.default_rng(seed)
    indptr = g.indptr.astype(np.int64)
    indices = g.indices.astype(np.int64)
    weights = np.ones(len(indices), dtype=np.float64)
    node_comm = np.arange(n, dtype=np.int64)

    degree = np.asarray(
        [weights[indptr[u] : indptr[u + 1]].sum() for u in range(len(indptr) - 1)]
    )
    m2 = float(degree.sum())
    prev_q = _modularity(indptr, indices, weights, np.arange(len(indptr) - 1), degree, m2)

    while True:
        level_n = len(indptr) - 1
        comm = np.arange(level_n, dtype=np.int64)
        sigma_tot = degree.copy()
        while True:
            order = rng.permutation(level_n).astype(np.int64)
            moves = kernels.louvain_sweep(
                indptr, indices, weights, order, comm, degree, sigma_tot, m2
            )
            if moves == 0:
                break
        comm = _relabel_first_occurrence(comm)
        q = _modularity(indptr, indices, weights, comm, degree, m2)
        if q < prev_q - 1e-9:
            raise AssertionError("modularity decreased across a Louvain pass")
        node_comm = comm[node_comm]
        num_comms = int(comm.max()) + 1
        if num_comms == level_n or q - prev_q < 1e-7:
            break
        prev_q = q
        indptr, indices, weights = _coarsen(indptr, indices, weights, comm, num_comms)
        degree = np.asarray(
            [weights[indptr[u] : indptr[u + 1]].sum() for u in range(len(indptr) - 1)]
        )
    return _relabel_first_occurrence(node_comm)


# ---------------------------------------------------------------------------
# Splits
# ---------------------------------------------------------------------------


def _make_client(g: Graph, client_id: int, nodes: np.ndarray) -> ClientSubgraph:
    return ClientSubgraph(client_id, induced_subgraph(g, nodes), nodes)


def community_split(g: Graph, num_clients: int, seed: int) -> FederatedTask:
    """Louvain communities packed onto clients by the smallest-node-count rule."""
    if num_clients < 2:
        raise ValueError("community split needs at least two clients")
    comm = louvain(g, seed)
    sizes = np.bincount(comm)
    if num_clients > len(sizes):
        raise ValueError(
            f"cannot spread {len(sizes)} communities over {num_clients} clients"
        )
    order = np.argsort(-sizes, kind="stable")  # size desc, ties by community id
    counts = np.zeros(num_clients, dtype=np.int64)
    client_of_comm = np.empty(len(sizes), dtype=np.int64)
    for c in order:
        j = int(np.argmin(counts))  # ties resolve to the lowest client id
        client_of_comm[c] = j
        counts[j] += sizes[c]
    assignment = client_of_comm[comm]
    clients = []
    log = []
    for j in range(num_clients):
        nodes = np.flatnonzero(assignment == j)
        clients.append(_make_client(g, j, nodes))
        log.append(InjectionRecord(j, "none", 0))
    return FederatedTask(tuple(clients), "community", seed, tuple(log))


def _bfs_distances(g: Graph, sources: list[int]) -> np.ndarray:
    dist = np.full(g.num_nodes, -1, dtype=np.int64)
    queue = deque()
    for s in sources:
        dist[s] = 0
        queue.append(s)
    while queue:
        u = queue.popleft()
        for v in g.neighbors(u):
            if dist[v] < 0:
                dist[v] = dist[u] + 1
                queue.append(v)
    return dist


def balanced_partition(g: Graph, num_clients: int, seed: int) -> np.ndarray:
    """Greedy BFS region growing from spread high-degree seeds; sizes within ±20%.

    Returns the client assignment vector. The seed argument only orders
    internal tie-breaking streams; the procedure itself is deterministic.
    """
    n = g.num_nodes
    if num_clients < 1 or num_clients > n:
        raise ValueError("need 1 <= num_clients <= num_nodes")
    deg = g.degrees

    seeds = [int(np.argmax(deg))]
    dist = _bfs_distances(g, seeds)
    for _ in range(num_clients - 1):
        reach = np.where(dist < 0, n + 1, dist)  # unreached counts as farthest
        best = np.lexsort((np.arange(n), -deg, -reach))[0]
        seeds.append(int(best))
        new_dist = _bfs_distances(g, [int(best)])
        both = (dist >= 0) & (new_dist >= 0)
        dist = np.where(both, np.minimum(dist, new_dist), np.maximum(dist, new_dist))

    assignment = np.full(n, -1, dtype=np.int64)
    sizes = np.zeros(num_clients, dtype=np.int64)
    queues: list[deque] = [deque() for _ in range(num_clients)]
    for j, s in enumerate(seeds):
        if assignment[s] >= 0:  # duplicate seed under extreme ties
            continue
        assignment[s] = j
        sizes[j] += 1
        queues[j].extend(int(v) for v in g.neighbors(s))

    alive = [True] * num_clients
    while any(alive):
        j = min(
            (j for j in range(num_clients) if alive[j]),
            key=lambda j: (sizes[j], j),
        )
        node = None
        while queues[j]:
            cand = queues[j].popleft()
            if assignment[cand] < 0:
                node = cand
                break
        if node is None:
            alive[j] = False
            continue
        assignment[node] = j
        sizes[j] += 1
        queues[j].extend(int(v) for v in g.neighbors(node) if assignment[v] < 0)

    for node in np.flatnonzero(assignment < 0):
        j = int(np.argmin(sizes))
        assignment[node] = j
        sizes[j] += 1

    target = n / num_clients
    hi = math.floor(1.2 * target)
    lo = math.ceil(0.8 * target)
    while True:
        big = int(np.argmax(sizes))
        small = int(np.argmin(sizes))
        if (sizes[big] <= hi and sizes[small] >= lo) or sizes[big] - sizes[small] <= 1:
            break
        members = np.flatnonzero(assignment == big)
        intra = np.asarray(
            [int(np.sum(assignment[g.neighbors(u)] == big)) for u in members]
        )
        node = int(members[np.lexsort((members, intra))[0]])
        assignment[node] = small
        sizes[big] -= 1
        sizes[small] += 1
    return assignment


def inject_edges(
    sub: ClientSubgraph, mode: str, ratio: float, seed: int
) -> tuple[ClientSubgraph, InjectionRecord]:
    """Add round(ratio*m) same-label (homo) or cross-label (hetero) non-edges.

    Sampling is uniform without replacement over the candidate pool; if the
    pool runs out the shortfall is recorded rather than raised. Uses ground
    truth labels of all nodes: this is offline benchmark synthesis.
    """
    if mode not in ("homo", "hetero"):
        raise ValueError("mode must be 'homo' or 'hetero'")
    if not 0.0 <= ratio:
        raise ValueError("ratio must be non-negative")
    g = sub.graph
    want = int(round(ratio * g.num_edges))
    same = g.labels[:, None] == g.labels[None, :]
    candidate = same if mode == "homo" else ~same
    candidate = np.triu(candidate, k=1) & (g.dense_adjacency() == 0)
    ci, cj = np.nonzero(candidate)
    take = min(want, len(ci))
    rng = np.random.default_rng(seed)
    pick = rng.choice(len(ci), size=take, replace=False) if take else np.empty(0, dtype=np.int64)
    new_edges = np.concatenate(
        [g.edge_array(), np.stack([ci[pick], cj[pick]], axis=1)], axis=0
    )
    record = InjectionRecord(sub.client_id, mode, edges_added=take, shortfall=want - take)
    if record.shortfall:
        warnings.warn(
            f"client {sub.client_id}: {mode} injection pool exhausted, "
            f"added {take} of {want} edges"
        )
    return replace(sub, graph=g.with_edges(new_edges)), record


def structure_noniid_split(
    g: Graph,
    num_clients: int,
    p_s: float = 0.5,
    ratio: float = 0.5,
    seed: int = 0,
) -> FederatedTask:
    """Balanced partition, then per-client homo (prob p_s) or hetero edge injection."""
    if not 0.0 <= p_s <= 1.0:
        raise ValueError("p_s must be a probability")
    streams = np.random.SeedSequence(seed).generate_state(2 + num_clients, dtype=np.uint64)
    assignment = balanced_partition(g, num_clients, int(streams[0]))
    mode_rng = np.random.default_rng(int(streams[1]))
    homo_draw = mode_rng.random(num_clients) < p_s
    clients = []
    log = []
    for j in range(num_clients):
        nodes = np.flatnonzero(assignment == j)
        sub = _make_client(g, j, nodes)
        mode = "homo" if homo_draw[j] else "hetero"
        sub, record = inject_edges(sub, mode, ratio, int(streams[2 + j]))
        clients.append(sub)
        log.append(record)
    return FederatedTask(
        tuple(clients), "structure-noniid", seed, tuple(log), p_s=p_s, ratio=ratio
    )


def apply_sparsity(
    task: FederatedTask,
    feature_missing: float = 0.0,
    edge_drop: float = 0.0,
    label_rate_override: float | None = None,
    seed: int | None = None,
) -> FederatedTask:
    """Sparsify a task: blank unlabeled feature rows, drop edges, thin train masks."""
    if not 0.0 <= feature_missing <= 1.0:
        raise ValueError("feature_missing must lie in [0, 1]")
    if not 0.0 <= edge_drop < 1.0:
        raise ValueError("edge_drop must lie in [0, 1)")
    if label_rate_override is not None and not 0.0 < label_rate_override <= 1.0:
        raise ValueError("label_rate_override must lie in (0, 1]")
    master = np.random.SeedSequence(task.seed if seed is None else seed)
    clients = []
    for sub, child in zip(task.clients, master.spawn(len(task.clients))):
        rng = np.random.default_rng(child)
        g = sub.graph
        if edge_drop > 0.0 and g.num_edges:
            edges = g.edge_array()
            n_drop = int(round(edge_drop * len(edges)))
            keep = np.setdiff1d(
                np.arange(len(edges)),
                rng.choice(len(edges), size=n_drop, replace=False),
            )
            g = g.with_edges(edges[keep])
        if feature_missing > 0.0:
            unlabeled = np.flatnonzero(~g.train_mask)
            n_zero = int(round(feature_missing * len(unlabeled)))
            chosen = rng.choice(unlabeled, size=n_zero, replace=False) if n_zero else []
            feats = g.features.copy()
            feats[chosen] = 0.0
            g = g.with_features(feats)
        if label_rate_override is not None:
            g = _thin_train_mask(g, label_rate_override, rng)
        clients.append(replace(sub, graph=g))
    return replace(task, clients=tuple(clients))


def _thin_train_mask(g: Graph, rate: float, rng: np.random.Generator) -> Graph:
    train_idx = np.flatnonzero(g.train_mask)
    target = int(round(rate * g.num_nodes))
    if target >= len(train_idx):
        return g
    kept = set(rng.choice(train_idx, size=target, replace=False).tolist())
    for cls in np.unique(g.labels[train_idx]):
        cls_idx = train_idx[g.labels[train_idx] == cls]
        if not kept & set(cls_idx.tolist()):
            warnings.warn(f"label rate override would empty class {cls}; keeping one node")
            kept.add(int(rng.choice(cls_idx)))
    mask = np.zeros(g.num_nodes, dtype=bool)
    mask[sorted(kept)] = True
    return g.with_masks(mask, g.val_mask, g.test_mask)
