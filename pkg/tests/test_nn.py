"""Differentiable blocks against finite differences and closed-form cases."""

import numpy as np
import pytest

from adafgl import nn
from adafgl.graph import normalized_adjacency
from oracles import finite_diff_param_grads, random_graph, relative_error

GRAD_TOL = 1e-4


def check_grads(loss_and_backward, params, tol=GRAD_TOL):
    """loss_and_backward() must populate grads; compares with central differences."""
    for p in params:
        p.zero_grad()
    loss_and_backward()
    analytic = [p.grad.copy() for p in params]

    def loss_only():
        for p in params:
            p.zero_grad()
        return loss_and_backward()

    numeric = finite_diff_param_grads(loss_only, params)
    for p, a, n in zip(params, analytic, numeric):
        err = relative_error(a, n)
        assert err < tol, f"{p.name}: relative error {err}"


class TestGcn:
    def test_identity_stack(self):
        x = np.abs(np.random.default_rng(0).standard_normal((4, 3)))
        state = nn.ModelState(
            [nn.Parameter("w1", np.eye(3)), nn.Parameter("w2", np.eye(3))],
            {"arch": "gcn", "dims": [3, 3, 3], "activation": "relu", "norm_exponent": 0.5},
        )
        logits, _ = nn.gcn_forward(np.eye(4), x, state)
        np.testing.assert_allclose(logits, x)

    def test_zero_weights_zero_logits(self):
        x = np.random.default_rng(1).standard_normal((4, 3))
        state = nn.ModelState(
            [nn.Parameter("w1", np.zeros((3, 5))), nn.Parameter("w2", np.zeros((5, 2)))],
            {"arch": "gcn", "dims": [3, 5, 2], "activation": "relu", "norm_exponent": 0.5},
        )
        logits, _ = nn.gcn_forward(np.eye(4), x, state)
        assert not logits.any()

    @pytest.mark.parametrize("seed", range(5))
    def test_gradients_match_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        g = random_graph(rng, 6, 0.4, classes=3, f=5)
        adj = normalized_adjacency(g, 0.5)
        state = nn.init_gcn(5, 7, 3, seed=rng)
        mask = np.ones(6, dtype=bool)

        def run():
            logits, cache = nn.gcn_forward(adj, g.features, state)
            loss, grad = nn.softmax_cross_entropy(logits, g.labels, mask)
            nn.gcn_backward(state, cache, grad)
            return loss

        check_grads(run, state.params)

    def test_shape_mismatch(self):
        state = nn.init_gcn(4, 5, 2, seed=0)
        with pytest.raises(ValueError):
            nn.gcn_forward(np.eye(3), np.zeros((3, 7)), state)


class TestMlp:
    def test_identity(self):
        x = np.abs(np.random.default_rng(2).standard_normal((5, 3)))
        state = nn.ModelState(
            [
                nn.Parameter("w0", np.eye(3)),
                nn.Parameter("b0", np.zeros((1, 3))),
                nn.Parameter("w1", np.eye(3)),
                nn.Parameter("b1", np.zeros((1, 3))),
            ],
            {"arch": "mlp", "dims": [3, 3, 3], "activation": "relu", "prefix": ""},
        )
        out, _ = nn.mlp_forward(x, state)
        np.testing.assert_allclose(out, x)

    def test_zero_weights(self):
        state = nn.init_mlp([3, 4, 2], seed=0)
        for p in state.params:
            p.value[...] = 0.0
        out, _ = nn.mlp_forward(np.random.default_rng(3).standard_normal((5, 3)), state)
        assert not out.any()

    @pytest.mark.parametrize("seed", range(5))
    def test_gradients_match_finite_differences(self, seed):
        rng = np.random.default_rng(100 + seed)
        x = rng.standard_normal((6, 4))
        labels = rng.integers(0, 3, size=6)
        state = nn.init_mlp([4, 5, 3], seed=rng)
        mask = np.ones(6, dtype=bool)

        def run():
            out, cache = nn.mlp_forward(x, state)
            loss, grad = nn.softmax_cross_entropy(out, labels, mask)
            nn.mlp_backward(state, cache, grad)
            return loss

        check_grads(run, state.params)


class TestSoftmaxCrossEntropy:
    def test_one_hot_probability_zero_loss(self):
        probs = np.array([[1.0, 0.0], [0.0, 1.0]])
        loss, _ = nn.softmax_cross_entropy(probs, np.array([0, 1]), np.ones(2, bool), from_logits=False)
        assert loss == 0.0

    def test_uniform_probabilities_log4(self):
        probs = np.full((3, 4), 0.25)
        loss, _ = nn.softmax_cross_entropy(probs, np.zeros(3, int), np.ones(3, bool), from_logits=False)
        assert loss == pytest.approx(np.log(4.0), abs=1e-12)

    def test_empty_mask(self):
        with pytest.raises(ValueError):
            nn.softmax_cross_entropy(np.zeros((2, 2)), np.zeros(2, int), np.zeros(2, bool))

    @pytest.mark.parametrize("seed", range(4))
    def test_logits_gradient(self, seed):
        rng = np.random.default_rng(200 + seed)
        logits = nn.Parameter("x", rng.standard_normal((5, 4)))
        labels = rng.integers(0, 4, size=5)
        mask = rng.random(5) < 0.7
        mask[0] = True

        def run():
            loss, grad = nn.softmax_cross_entropy(logits.value, labels, mask)
            logits.grad += grad
            return loss

        check_grads(run, [logits])

    @pytest.mark.parametrize("seed", range(4))
    def test_probability_gradient(self, seed):
        rng = np.random.default_rng(300 + seed)
        raw = rng.random((5, 3)) + 0.1
        probs = nn.Parameter("p", raw / raw.sum(axis=1, keepdims=True))
        labels = rng.integers(0, 3, size=5)
        mask = np.ones(5, dtype=bool)

        def run():
            loss, grad = nn.softmax_cross_entropy(probs.value, labels, mask, from_logits=False)
            probs.grad += grad
            return loss

        check_grads(run, [probs])


class TestFrobenius:
    def test_equal_inputs(self):
        a = np.ones((2, 3))
        loss, grad = nn.frobenius_loss(a, a.copy())
        assert loss == 0.0
        assert not grad.any()

    def test_pythagorean(self):
        a = np.array([[3.0, 4.0], [0.0, 0.0]])
        loss, _ = nn.frobenius_loss(a, np.zeros((2, 2)))
        assert loss == pytest.approx(5.0, abs=1e-12)

    @pytest.mark.parametrize("seed", range(4))
    def test_gradient(self, seed):
        rng = np.random.default_rng(400 + seed)
        a = nn.Parameter("a", rng.standard_normal((4, 3)))
        b = rng.standard_normal((4, 3))

        def run():
            loss, grad = nn.frobenius_loss(a.value, b)
            a.grad += grad
            return loss

        check_grads(run, [a])

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            nn.frobenius_loss(np.zeros((2, 2)), np.zeros((3, 2)))


class TestAdam:
    def test_zero_gradients_only_weight_decay_moves(self):
        state = nn.init_mlp([2, 2], seed=0)
        before = [p.value.copy() for p in state.params]
        opt = nn.Adam(lr=0.1, weight_decay=0.0)
        opt.step(state)
        for p, b in zip(state.params, before):
            np.testing.assert_array_equal(p.value, b)
        opt_wd = nn.Adam(lr=0.1, weight_decay=0.5)
        opt_wd.step(state)
        changed = any(not np.array_equal(p.value, b) for p, b in zip(state.params, before))
        assert changed  # decay alone shifts nonzero weights

    def test_first_step_closed_form(self):
        w = nn.Parameter("w", np.array([[2.0]]))
        w.grad = np.array([[0.5]])
        state = nn.ModelState([w], {"arch": "test"})
        opt = nn.Adam(lr=0.1, weight_decay=0.0)
        opt.step(state)
        # first Adam step: m-hat = g, v-hat = g^2 -> update = -lr * g / (|g| + eps)
        expected = 2.0 - 0.1 * 0.5 / (0.5 + 1e-8)
        assert w.value[0, 0] == pytest.approx(expected, abs=1e-12)
        assert not w.grad.any()

    def test_deterministic_across_identical_models(self):
        rng = np.random.default_rng(5)
        grads = rng.standard_normal((3, 2))
        states = []
        for _ in range(2):
            s = nn.init_mlp([3, 2], seed=7)
            s.param("w0").grad += grads
            opt = nn.Adam()
            opt.step(s)
            states.append(s)
        np.testing.assert_array_equal(states[0].param("w0").value, states[1].param("w0").value)


class TestModelState:
    def test_serialization_round_trip_bit_exact(self):
        state = nn.init_gcn(6, 4, 3, seed=11)
        blob = state.to_bytes()
        back = nn.ModelState.from_bytes(blob)
        assert back.meta == state.meta
        for a, b in zip(state.params, back.params):
            assert a.name == b.name
            np.testing.assert_array_equal(a.value, b.value)
        assert back.to_bytes() == blob

    def test_rejects_garbage(self):
        with pytest.raises(ValueError):
            nn.ModelState.from_bytes(b"nope" + b"\x00" * 16)

    def test_forward_deterministic(self):
        rng = np.random.default_rng(8)
        x = rng.standard_normal((5, 6))
        state = nn.init_mlp([6, 4, 2], seed=3)
        out1, _ = nn.mlp_forward(x, state)
        out2, _ = nn.mlp_forward(x, state)
        np.testing.assert_array_equal(out1, out2)

    def test_compatibility(self):
        a = nn.init_gcn(4, 3, 2, seed=0)
        b = nn.init_gcn(4, 3, 2, seed=1)
        c = nn.init_gcn(4, 5, 2, seed=0)
        assert a.compatible_with(b)
        assert not a.compatible_with(c)
