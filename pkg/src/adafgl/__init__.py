"""Desk-scale federated graph learning simulator.

Provides an adaptive two-step personalized training pipeline (federated
knowledge extractor + per-client homophilous/heterophilous propagation),
federated data-split generators (community split, structure Non-iid split),
and a FedGCN baseline.
"""

from .federation import FederationConfig, fedavg_aggregate, run_federation
from .graph import (
    Graph,
    edge_homophily,
    from_edges,
    induced_subgraph,
    label_propagation,
    node_homophily,
    normalized_adjacency,
    sbm_generate,
)
from .personalize import Step2Hyper, adaptive_combine, compute_hcs, optimize_topology, step2_train
from .splits import (
    ClientSubgraph,
    FederatedTask,
    apply_sparsity,
    balanced_partition,
    community_split,
    inject_edges,
    louvain,
    structure_noniid_split,
)

__all__ = [
    "FederationConfig",
    "fedavg_aggregate",
    "run_federation",
    "Graph",
    "edge_homophily",
    "from_edges",
    "induced_subgraph",
    "label_propagation",
    "node_homophily",
    "normalized_adjacency",
    "sbm_generate",
    "Step2Hyper",
    "adaptive_combine",
    "compute_hcs",
    "optimize_topology",
    "step2_train",
    "ClientSubgraph",
    "FederatedTask",
    "apply_sparsity",
    "balanced_partition",
    "community_split",
    "inject_edges",
    "louvain",
    "structure_noniid_split",
]

__version__ = "0.1.0"
