"""Round-based federated training with FedAvg aggregation (the FedGCN baseline
and step one of the adaptive pipeline)."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .graph import Graph, normalized_adjacency
from .splits import ClientSubgraph, FederatedTask


@dataclass
class FederationConfig:
    rounds: int = 100
    local_epochs: int = 5
    participation: float = 1.0
    lr: float = 0.01
    weight_decay: float = 5e-4
    hidden: int = 64
    norm_exponent: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if self.local_epochs < 0:
            raise ValueError("local_epochs must be >= 0")
        if not 0.0 < self.participation <= 1.0:
            raise ValueError("participation must lie in (0, 1]")


@dataclass
class ClientWorker:
    client_id: int
    subgraph: ClientSubgraph
    model: nn.ModelState
    optimizer: nn.Adam
    adj_norm: np.ndarray
    ax: np.ndarray  # cached adj_norm @ features (fixed across rounds)
    n_train: int


@dataclass
class ClientRoundMetrics:
    client_id: int
    participated: bool
    train_loss: float | None
    val_acc: float | None
    test_acc: float | None
    n_train: int
    n_val: int
    n_test: int


@dataclass
class RoundReport:
    round_index: int
    participants: list[int]
    clients: list[ClientRoundMetrics]
    train_loss: float | None = None
    val_acc: float | None = None
    test_acc: float | None = None

    def __post_init__(self):
        losses = [(c.train_loss, c.n_train) for c in self.clients if c.train_loss is not None]
        if losses:
            wsum = sum(n for _, n in losses)
            self.train_loss = sum(l * n for l, n in losses) / wsum if wsum else None
        self.val_acc = _weighted_acc([(c.val_acc, c.n_val) for c in self.clients])
        self.test_acc = _weighted_acc([(c.test_acc, c.n_test) for c in self.clients])


def _weighted_acc(pairs) -> float | None:
    total = sum(n for acc, n in pairs if acc is not None and n > 0)
    if total == 0:
        return None
    return sum(acc * n for acc, n in pairs if acc is not None and n > 0) / total


def make_worker(sub: ClientSubgraph, model: nn.ModelState, cfg: FederationConfig) -> ClientWorker:
    adj = normalized_adjacency(sub.graph, cfg.norm_exponent)
    return ClientWorker(
        client_id=sub.client_id,
        subgraph=sub,
        model=model,
        optimizer=nn.Adam(lr=cfg.lr, weight_decay=cfg.weight_decay),
        adj_norm=adj,
        ax=adj @ sub.graph.features,
        n_train=int(sub.graph.train_mask.sum()),
    )


def local_train(worker: ClientWorker, epochs: int) -> float | None:
    """Full-batch CE training on the worker's train mask; returns the last loss.

    Clients without train nodes are skipped (returns None).
    """
    g = worker.subgraph.graph
    if worker.n_train == 0:
        return None
    loss = None
    for _ in range(epochs):
        logits, cache = nn.gcn_forward(worker.adj_norm, g.features, worker.model, ax=worker.ax)
        loss, grad = nn.softmax_cross_entropy(logits, g.labels, g.train_mask)
        nn.gcn_backward(worker.model, cache, grad)
        worker.optimizer.step(worker.model)
    if loss is None:  # epochs == 0: report without updating
        logits, _ = nn.gcn_forward(worker.adj_norm, g.features, worker.model, ax=worker.ax)
        loss, _ = nn.softmax_cross_entropy(logits, g.labels, g.train_mask)
    return loss


def fedavg_aggregate(models: list[tuple[nn.ModelState, int]]) -> nn.ModelState:
    """Parameter-wise weighted mean with weights n_i / sum(n_i).

    Computed in anchored form p0 + sum_i w_i * (p_i - p0), which keeps the
    aggregate exactly equal to the inputs when they are identical (and to the
    single input when there is only one), independent of the weights.
    """
    if not models:
        raise ValueError("nothing to aggregate")
    ref = models[0][0]
    for other, _ in models[1:]:
        if not ref.compatible_with(other):
            raise ValueError("aggregation needs identical model metadata and shapes")
    total = float(sum(n for _, n in models))
    if total == 0.0:
        warnings.warn("all aggregation weights are zero; falling back to uniform")
        weights = [1.0 / len(models)] * len(models)
    else:
        weights = [n / total for _, n in models]
    out = ref.copy()
    for p in out.params:
        p.zero_grad()
    for (model, _), w in zip(models[1:], weights[1:]):
        for acc, p, base in zip(out.params, model.params, ref.params):
            acc.value += w * (p.value - base.value)
    return out


def evaluate_model(worker: ClientWorker, model: nn.ModelState) -> tuple[float | None, float | None]:
    g = worker.subgraph.graph
    logits, _ = nn.gcn_forward(worker.adj_norm, g.features, model, ax=worker.ax)
    val = nn.accuracy(logits, g.labels, g.val_mask) if g.val_mask.any() else None
    test = nn.accuracy(logits, g.labels, g.test_mask) if g.test_mask.any() else None
    return val, test


def run_federation(
    task: FederatedTask, cfg: FederationConfig
) -> tuple[nn.ModelState, list[RoundReport], list[ClientWorker]]:
    """Standard federated loop; returns the final aggregate (the knowledge
    extractor), per-round reports, and the workers holding the broadcast model."""
    init_ss, sample_ss = np.random.SeedSequence(cfg.seed).spawn(2)
    any_graph = task.clients[0].graph
    global_model = nn.init_gcn(
        any_graph.features.shape[1],
        cfg.hidden,
        any_graph.num_classes,
        np.random.default_rng(init_ss),
        cfg.norm_exponent,
    )
    workers = [make_worker(sub, global_model.copy(), cfg) for sub in task.clients]
    sampler = np.random.default_rng(sample_ss)
    num = len(workers)
    reports: list[RoundReport] = []

    for t in range(cfg.rounds):
        n_part = math.ceil(cfg.participation * num)
        participants = sorted(int(i) for i in sampler.choice(num, size=n_part, replace=False))
        losses: dict[int, float | None] = {}
        for cid in participants:
            worker = workers[cid]
            worker.model = global_model.copy()
            losses[cid] = local_train(worker, cfg.local_epochs)
        pool = [(workers[cid].model, workers[cid].n_train) for cid in participants]
        global_model = fedavg_aggregate(pool)

        metrics = []
        for worker in workers:
            val, test = evaluate_model(worker, global_model)
            g = worker.subgraph.graph
            metrics.append(
                ClientRoundMetrics(
                    client_id=worker.client_id,
                    participated=worker.client_id in losses,
                    train_loss=losses.get(worker.client_id),
                    val_acc=val,
                    test_acc=test,
                    n_train=worker.n_train,
                    n_val=int(g.val_mask.sum()),
                    n_test=int(g.test_mask.sum()),
                )
            )
        reports.append(RoundReport(round_index=t, participants=participants, clients=metrics))

    for worker in workers:  # final broadcast of the knowledge extractor
        worker.model = global_model.copy()
    return global_model, reports, workers
