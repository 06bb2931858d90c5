"""Split generators: Louvain, community packing, partitioning, injection, sparsity."""

import warnings

import numpy as np
import pytest

from adafgl import (
    apply_sparsity,
    balanced_partition,
    community_split,
    edge_homophily,
    from_edges,
    inject_edges,
    louvain,
    sbm_generate,
    structure_noniid_split,
)
from adafgl.dataio import make_masks
from adafgl.splits import ClientSubgraph
from oracles import random_graph


def clique_graph(sizes, labels_per_clique=None):
    """Disjoint cliques; returns the graph and the clique id of each node."""
    edges = []
    labels = []
    clique_of = []
    offset = 0
    for ci, size in enumerate(sizes):
        for i in range(size):
            for j in range(i + 1, size):
                edges.append((offset + i, offset + j))
        lab = labels_per_clique[ci] if labels_per_clique else ci % 2
        labels.extend([lab] * size)
        clique_of.extend([ci] * size)
        offset += size
    n = offset
    g = from_edges(n, np.asarray(edges), np.zeros((n, 2)), labels)
    return g, np.asarray(clique_of)


class TestLouvain:
    def test_two_disjoint_cliques(self):
        g, clique_of = clique_graph([4, 4])
        comm = louvain(g, seed=0)
        assert len(np.unique(comm)) == 2
        for c in (0, 1):
            assert len(np.unique(comm[clique_of == c])) == 1

    def test_complete_graph_single_community(self):
        g, _ = clique_graph([6])
        comm = louvain(g, seed=1)
        assert len(np.unique(comm)) == 1

    def test_empty_graph_singletons(self):
        g = from_edges(5, np.empty((0, 2)), np.zeros((5, 1)), [0] * 5)
        np.testing.assert_array_equal(louvain(g, seed=0), np.arange(5))

    def test_deterministic_by_seed(self):
        rng = np.random.default_rng(0)
        g = random_graph(rng, 80, 0.08)
        np.testing.assert_array_equal(louvain(g, seed=5), louvain(g, seed=5))

    def test_recovers_sbm_blocks(self):
        g = sbm_generate(90, 3, 0.5, 0.01, 2, seed=4)
        comm = louvain(g, seed=0)
        # same-block pairs should dominate each community
        for c in np.unique(comm):
            block_labels = g.labels[comm == c]
            assert (block_labels == np.bincount(block_labels).argmax()).mean() > 0.9


class TestCommunitySplit:
    def test_four_equal_communities_two_clients(self):
        g, _ = clique_graph([5, 5, 5, 5])
        task = community_split(g, 2, seed=0)
        sizes = sorted(c.graph.num_nodes for c in task.clients)
        assert sizes == [10, 10]

    def test_greedy_packing_rule(self):
        # sizes 5,4,3,2 with the smallest-node-count rule:
        # 5 -> c0, 4 -> c1, 3 -> c1 (4 < 5), 2 -> c0 => {5,2} and {4,3}
        g, clique_of = clique_graph([5, 4, 3, 2])
        task = community_split(g, 2, seed=0)
        groups = []
        for client in task.clients:
            counts = np.bincount(clique_of[client.global_ids], minlength=4)
            groups.append(sorted((int(c) for c in counts if c), reverse=True))
        assert sorted(groups) == [[4, 3], [5, 2]]

    def test_more_clients_than_communities(self):
        g, _ = clique_graph([4, 4])
        with pytest.raises(ValueError):
            community_split(g, 3, seed=0)

    def test_partition_is_disjoint_cover(self, benchmark_graph):
        task = community_split(benchmark_graph, 4, seed=0)
        all_ids = np.concatenate([c.global_ids for c in task.clients])
        assert len(all_ids) == len(np.unique(all_ids)) == benchmark_graph.num_nodes


class TestBalancedPartition:
    def test_path_graph_even_halves(self):
        n = 10
        edges = [(i, i + 1) for i in range(n - 1)]
        g = from_edges(n, np.asarray(edges), np.zeros((n, 1)), [0] * n)
        assignment = balanced_partition(g, 2, seed=0)
        sizes = np.bincount(assignment)
        assert sorted(sizes.tolist()) == [5, 5]
        # regions stay contiguous on a path
        for j in (0, 1):
            members = np.flatnonzero(assignment == j)
            assert members.max() - members.min() == len(members) - 1

    def test_random_graph_balance_band(self):
        rng = np.random.default_rng(1)
        g = random_graph(rng, 100, 0.08)
        assignment = balanced_partition(g, 10, seed=0)
        sizes = np.bincount(assignment, minlength=10)
        assert sizes.min() >= 8 and sizes.max() <= 12

    def test_singleton_partition(self):
        g, _ = clique_graph([6])
        assignment = balanced_partition(g, 6, seed=0)
        assert sorted(np.bincount(assignment).tolist()) == [1] * 6

    def test_bounds(self):
        g, _ = clique_graph([4])
        with pytest.raises(ValueError):
            balanced_partition(g, 5, seed=0)


def masked_subgraph(g, client_id=0):
    return ClientSubgraph(client_id, g, np.arange(g.num_nodes))


class TestInjectEdges:
    def test_hetero_on_single_class_pool_empty(self):
        g, _ = clique_graph([4], labels_per_clique=[0])
        with pytest.warns(UserWarning, match="exhausted"):
            sub, record = inject_edges(masked_subgraph(g), "hetero", 0.5, seed=0)
        assert record.edges_added == 0
        assert record.shortfall == round(0.5 * g.num_edges)
        assert sub.graph.num_edges == g.num_edges

    def test_exact_count_when_pool_suffices(self):
        g = sbm_generate(60, 2, 0.25, 0.02, 3, seed=3)
        m = g.num_edges
        sub, record = inject_edges(masked_subgraph(g), "homo", 0.5, seed=1)
        assert record.edges_added == round(0.5 * m)
        assert record.shortfall == 0
        assert sub.graph.num_edges == m + record.edges_added

    def test_injection_moves_homophily_directionally(self):
        g = sbm_generate(60, 2, 0.2, 0.08, 3, seed=5)
        before = edge_homophily(g)
        homo, _ = inject_edges(masked_subgraph(g), "homo", 0.5, seed=2)
        hetero, _ = inject_edges(masked_subgraph(g), "hetero", 0.5, seed=2)
        assert edge_homophily(homo.graph) > before
        assert edge_homophily(hetero.graph) < before

    def test_no_duplicates_or_self_loops(self):
        g = sbm_generate(40, 2, 0.2, 0.1, 3, seed=6)
        sub, record = inject_edges(masked_subgraph(g), "homo", 1.0, seed=3)
        edges = sub.graph.edge_array()
        pairs = set(map(tuple, edges.tolist()))
        assert len(pairs) == len(edges)
        assert all(u != v for u, v in pairs)

    def test_added_edges_respect_mode(self):
        g = sbm_generate(40, 3, 0.15, 0.1, 3, seed=7)
        before = set(map(tuple, g.edge_array().tolist()))
        for mode, want_same in (("homo", True), ("hetero", False)):
            sub, _ = inject_edges(masked_subgraph(g), mode, 0.4, seed=4)
            new = set(map(tuple, sub.graph.edge_array().tolist())) - before
            assert new and all((g.labels[u] == g.labels[v]) == want_same for u, v in new)

    def test_deterministic(self):
        g = sbm_generate(40, 2, 0.2, 0.1, 3, seed=8)
        a, _ = inject_edges(masked_subgraph(g), "homo", 0.5, seed=9)
        b, _ = inject_edges(masked_subgraph(g), "homo", 0.5, seed=9)
        np.testing.assert_array_equal(a.graph.indices, b.graph.indices)


class TestStructureNoniid:
    def test_all_homo_when_ps_one(self):
        g = sbm_generate(80, 2, 0.2, 0.05, 3, seed=9)
        task = structure_noniid_split(g, 2, p_s=1.0, seed=0)
        assert all(r.mode == "homo" for r in task.injection_log)

    def test_all_hetero_when_ps_zero(self):
        g = sbm_generate(80, 2, 0.2, 0.05, 3, seed=9)
        task = structure_noniid_split(g, 2, p_s=0.0, seed=0)
        assert all(r.mode == "hetero" for r in task.injection_log)

    def test_seed_fixed_rerun_identical(self, benchmark_graph):
        a = structure_noniid_split(benchmark_graph, 4, seed=1)
        b = structure_noniid_split(benchmark_graph, 4, seed=1)
        assert a.injection_log == b.injection_log
        for ca, cb in zip(a.clients, b.clients):
            np.testing.assert_array_equal(ca.graph.indices, cb.graph.indices)

    def test_per_client_homophily_spread(self, benchmark_graph, noniid_task):
        """Injection must create real topology variance across clients."""
        homs = [edge_homophily(c.graph) for c in noniid_task.clients]
        assert max(homs) - min(homs) >= 0.3

    def test_injection_direction_against_induced_subgraphs(self, benchmark_graph, noniid_task):
        from adafgl import induced_subgraph

        for sub, record in zip(noniid_task.clients, noniid_task.injection_log):
            induced = induced_subgraph(benchmark_graph, sub.global_ids)
            if record.edges_added == 0:
                continue
            before = edge_homophily(induced)
            after = edge_homophily(sub.graph)
            if record.mode == "homo":
                assert after > before
            else:
                assert after < before
            if record.shortfall == 0:
                assert record.edges_added == round(0.5 * induced.num_edges)


class TestApplySparsity:
    def make_task(self):
        g = sbm_generate(80, 2, 0.2, 0.05, 4, seed=10)
        g = make_masks(g, (0.3, 0.3, 0.4), seed=0)
        return structure_noniid_split(g, 2, seed=0)

    def test_noop_when_all_zero(self):
        task = self.make_task()
        out = apply_sparsity(task)
        for a, b in zip(task.clients, out.clients):
            np.testing.assert_array_equal(a.graph.indices, b.graph.indices)
            np.testing.assert_array_equal(a.graph.features, b.graph.features)
            np.testing.assert_array_equal(a.graph.train_mask, b.graph.train_mask)

    def test_edge_drop_counts(self):
        task = self.make_task()
        out = apply_sparsity(task, edge_drop=0.5, seed=1)
        for a, b in zip(task.clients, out.clients):
            assert b.graph.num_edges == a.graph.num_edges - round(0.5 * a.graph.num_edges)

    def test_feature_missing_full(self):
        task = self.make_task()
        out = apply_sparsity(task, feature_missing=1.0, seed=1)
        for before, after in zip(task.clients, out.clients):
            g = after.graph
            unlabeled = ~g.train_mask
            assert not g.features[unlabeled].any()
            np.testing.assert_array_equal(
                g.features[g.train_mask], before.graph.features[g.train_mask]
            )

    def test_label_override_keeps_every_class(self):
        task = self.make_task()
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            out = apply_sparsity(task, label_rate_override=0.02, seed=1)
        for before, after in zip(task.clients, out.clients):
            g = after.graph
            present = np.unique(before.graph.labels[before.graph.train_mask])
            kept = np.unique(g.labels[g.train_mask])
            np.testing.assert_array_equal(kept, present)
            assert g.train_mask.sum() <= before.graph.train_mask.sum()

    def test_validation(self):
        task = self.make_task()
        with pytest.raises(ValueError):
            apply_sparsity(task, edge_drop=1.0)
        with pytest.raises(ValueError):
            apply_sparsity(task, label_rate_override=0.0)


def test_full_pipeline_determinism_byte_for_byte(tmp_path):
    from adafgl.dataio import save_task

    g = sbm_generate(100, 3, 0.15, 0.02, 4, seed=12)
    g = make_masks(g, (0.2, 0.4, 0.4), seed=3)
    blobs = []
    for run in range(2):
        task = structure_noniid_split(g, 3, seed=21)
        out = tmp_path / f"run{run}"
        save_task(task, out)
        blob = b"".join(
            sorted(p.read_bytes() for p in out.rglob("*") if p.is_file())
        )
        blobs.append(blob)
    assert blobs[0] == blobs[1]
