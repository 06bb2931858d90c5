"""Per-client personalized propagation on top of the federated knowledge
extractor: topology optimization, homophilous and heterophilous branches, and
the homophily-confidence-score mixture that blends them."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .graph import label_propagation, normalized_adjacency, uniform_distribution
from .splits import ClientSubgraph


# ---------------------------------------------------------------------------
# Topology optimization
# ---------------------------------------------------------------------------


def optimize_topology(
    sub: ClientSubgraph,
    extractor: nn.ModelState,
    alpha: float,
    dense_cap: int = 8000,
) -> tuple[np.ndarray, np.ndarray]:
    """Blend the local adjacency with extractor prediction similarity.

    Returns the symmetric, zero-diagonal, degree-normalized propagation matrix
    and the extractor's softmax predictions. alpha=1 keeps only the original
    topology; alpha=0 keeps only prediction similarity.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    g = sub.graph
    if g.num_nodes > dense_cap:
        raise ValueError(
            f"client graph has {g.num_nodes} nodes > dense cap {dense_cap}; "
            "raise the cap or sparsify the propagation matrix"
        )
    adj_norm = normalized_adjacency(g, extractor.meta.get("norm_exponent", 0.5))
    logits, _ = nn.gcn_forward(adj_norm, g.features, extractor)
    p_hat = nn.softmax(logits)
    p = alpha * g.dense_adjacency() + (1.0 - alpha) * (p_hat @ p_hat.T)
    np.fill_diagonal(p, 0.0)
    d = p.sum(axis=1)
    inv_sqrt = np.where(d > 0, d, 1.0) ** -0.5
    inv_sqrt[d <= 0] = 0.0
    p_tilde = inv_sqrt[:, None] * p * inv_sqrt[None, :]
    p_tilde = 0.5 * (p_tilde + p_tilde.T)  # exact symmetry
    np.fill_diagonal(p_tilde, 0.0)
    return p_tilde, p_hat


def validate_propagation_matrix(p_tilde: np.ndarray, tol: float = 1e-9) -> None:
    if not np.all(np.isfinite(p_tilde)):
        raise ValueError("propagation matrix must be finite")
    if np.any(p_tilde < 0):
        raise ValueError("propagation matrix must be non-negative")
    if np.any(np.diag(p_tilde) != 0.0):
        raise ValueError("propagation matrix must have a zero diagonal")
    if np.abs(p_tilde - p_tilde.T).max() > tol:
        raise ValueError("propagation matrix must be symmetric")


# ---------------------------------------------------------------------------
# Knowledge smoothing (shared embedding H-tilde)
# ---------------------------------------------------------------------------


@dataclass
class KnowledgeEmbedding:
    stack: np.ndarray  # concatenated propagated features, n x (k * f)
    h: np.ndarray  # MLP output, n x num_classes
    cache: dict


def knowledge_operator(p_tilde: np.ndarray) -> np.ndarray:
    """Symmetric normalization of the propagation matrix with self-loops."""
    s = p_tilde + np.eye(p_tilde.shape[0])
    inv_sqrt = s.sum(axis=1) ** -0.5
    return inv_sqrt[:, None] * s * inv_sqrt[None, :]


def propagate_stack(p_tilde: np.ndarray, x: np.ndarray, k: int) -> np.ndarray:
    """[S x, S^2 x, ..., S^k x] concatenated along features."""
    if k < 1:
        raise ValueError("need at least one smoothing step")
    operator = knowledge_operator(p_tilde)
    out = []
    h = x
    for _ in range(k):
        h = operator @ h
        out.append(h)
    return np.concatenate(out, axis=1)


def knowledge_smoothing(
    sub: ClientSubgraph, p_tilde: np.ndarray, k: int, theta: nn.ModelState
) -> KnowledgeEmbedding:
    stack = propagate_stack(p_tilde, sub.graph.features, k)
    h, cache = nn.mlp_forward(stack, theta)
    return KnowledgeEmbedding(stack=stack, h=h, cache=cache)


# ---------------------------------------------------------------------------
# Homophilous branch
# ---------------------------------------------------------------------------


def homo_forward(h_tilde: np.ndarray, p_hat: np.ndarray) -> np.ndarray:
    """Average of the softmaxed knowledge embedding and extractor predictions."""
    return (nn.softmax(h_tilde) + p_hat) / 2.0


def knowledge_preserving_loss(
    h_tilde: np.ndarray, p_hat: np.ndarray
) -> tuple[float, np.ndarray]:
    """Frobenius distance of softmax(h_tilde) to the frozen extractor predictions.

    The returned gradient is w.r.t. h_tilde (through the softmax)."""
    s = nn.softmax(h_tilde)
    loss, grad_s = nn.frobenius_loss(s, p_hat)
    return loss, nn.softmax_backward(s, grad_s)


# ---------------------------------------------------------------------------
# Heterophilous branch
# ---------------------------------------------------------------------------


def init_message_layers(width: int, layers: int, seed) -> nn.ModelState:
    """Linear message-remapping layers (no activation: embeddings must stay signed)."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    params = []
    for i in range(layers):
        params.append(nn.Parameter(f"mw{i}", nn.glorot(rng, width, width)))
        params.append(nn.Parameter(f"mb{i}", np.zeros((1, width))))
    return nn.ModelState(params, {"arch": "message", "layers": layers, "width": width})


@dataclass
class HeteroState:
    theta_feature: nn.ModelState
    theta_message: nn.ModelState
    beta: float
    layers: int


def hetero_forward(
    sub: ClientSubgraph,
    h_tilde: np.ndarray,
    p_tilde: np.ndarray,
    state: HeteroState,
) -> tuple[np.ndarray, dict]:
    """Signed message propagation with a learnable similarity-blended topology.

    Per layer: remap messages, blend the propagation matrix with the row-L2
    normalized embedding similarity, then add positive and subtract negative
    aggregated messages. Returns the heterophilous prediction and the caches
    needed for the backward pass.
    """
    if not 0.0 <= state.beta <= 1.0:
        raise ValueError("beta must lie in [0, 1]")
    h_f, feature_cache = nn.mlp_forward(sub.graph.features, state.theta_feature)
    h = h_tilde
    p = p_tilde
    layer_caches = []
    for layer in range(state.layers):
        w = state.theta_message.param(f"mw{layer}").value
        b = state.theta_message.param(f"mb{layer}").value
        z = h @ w + b
        norms = np.sqrt((z * z).sum(axis=1))
        safe = np.where(norms > 0, norms, 1.0)
        hn = z / safe[:, None]
        hn[norms == 0] = 0.0
        p_next = state.beta * p + (1.0 - state.beta) * (hn @ hn.T)
        p_pos = np.maximum(p_next, 0.0)
        p_neg = np.maximum(-p_next, 0.0)
        pos = p_pos @ z
        neg = p_neg @ z
        h_out = z + pos - neg
        if not np.all(np.isfinite(h_out)):
            raise FloatingPointError(f"non-finite values in message layer {layer}")
        layer_caches.append(
            {"h_in": h, "z": z, "norms": norms, "safe": safe, "hn": hn,
             "p": p_next, "p_pos": p_pos, "p_neg": p_neg}
        )
        h = h_out
        p = p_next
    s_f = nn.softmax(h_f)
    s_k = nn.softmax(h_tilde)
    s_m = nn.softmax(h)
    y_he = (s_f + s_k + s_m) / 3.0
    cache = {
        "feature_cache": feature_cache,
        "layer_caches": layer_caches,
        "s_f": s_f,
        "s_k": s_k,
        "s_m": s_m,
        "beta": state.beta,
    }
    return y_he, cache


def hetero_backward(
    state: HeteroState, cache: dict, grad_y_he: np.ndarray
) -> np.ndarray:
    """Backprop through the heterophilous branch.

    Accumulates gradients into theta_feature and theta_message and returns the
    gradient w.r.t. h_tilde (its softmax head plus the message-chain input).
    """
    third = grad_y_he / 3.0
    grad_h_f = nn.softmax_backward(cache["s_f"], third)
    grad_h_tilde = nn.softmax_backward(cache["s_k"], third)
    g = nn.softmax_backward(cache["s_m"], third)

    nn.mlp_backward(state.theta_feature, cache["feature_cache"], grad_h_f)

    beta = cache["beta"]
    dp_carry = None
    for layer in reversed(range(state.layers)):
        lc = cache["layer_caches"][layer]
        z, hn, p = lc["z"], lc["hn"], lc["p"]
        gz = g + lc["p_pos"].T @ g - lc["p_neg"].T @ g
        gp = (g @ z.T) * (p != 0.0)
        if dp_carry is not None:
            gp = gp + beta * dp_carry
        ghn = (1.0 - beta) * ((gp + gp.T) @ hn)
        # row-L2 normalization backward (rows with zero norm contribute nothing)
        inner = (ghn * hn).sum(axis=1, keepdims=True)
        gz_norm = (ghn - hn * inner) / lc["safe"][:, None]
        gz_norm[lc["norms"] == 0] = 0.0
        gz = gz + gz_norm
        w = state.theta_message.param(f"mw{layer}")
        b = state.theta_message.param(f"mb{layer}")
        w.grad += lc["h_in"].T @ gz
        b.grad += gz.sum(axis=0, keepdims=True)
        g = gz @ w.value.T
        dp_carry = gp
    return grad_h_tilde + g


# ---------------------------------------------------------------------------
# Homophily confidence score
# ---------------------------------------------------------------------------


@dataclass
class HcsReport:
    hcs: float
    masked_count: int
    accuracy_trace: list[float] = field(default_factory=list)


def compute_hcs(
    sub: ClientSubgraph,
    kappa: float = 0.5,
    steps: int = 5,
    mask_prob: float = 0.5,
    seed: int = 0,
) -> HcsReport:
    """Masked-label propagation accuracy as a homophily probe.

    Hides floor(mask_prob * |train|) train labels (at least one), propagates
    the rest, and scores argmax predictions on the hidden nodes. Ties resolve
    to the lowest class index.
    """
    g = sub.graph
    train_idx = np.flatnonzero(g.train_mask)
    if len(train_idx) < 2:
        warnings.warn(
            f"client {sub.client_id}: fewer than two train nodes, "
            "homophily confidence defaults to 0.5"
        )
        return HcsReport(hcs=0.5, masked_count=0)
    rng = np.random.default_rng(seed)
    n_masked = max(1, int(np.floor(mask_prob * len(train_idx))))
    masked = np.sort(rng.choice(train_idx, size=n_masked, replace=False))
    visible = np.setdiff1d(train_idx, masked)
    init = uniform_distribution(g.num_nodes, g.num_classes)
    init[visible] = 0.0
    init[visible, g.labels[visible]] = 1.0
    trace = []
    for s in range(1, steps + 1):
        dist = label_propagation(g, init, kappa, s)
        pred = np.argmax(dist[masked], axis=1)
        trace.append(float((pred == g.labels[masked]).mean()))
    return HcsReport(hcs=trace[-1], masked_count=n_masked, accuracy_trace=trace)


def adaptive_combine(y_ho: np.ndarray, y_he: np.ndarray, hcs: float) -> np.ndarray:
    """Convex mixture of the two branch predictions weighted by the confidence score."""
    if not 0.0 <= hcs <= 1.0:
        raise ValueError("hcs must lie in [0, 1]")
    return hcs * y_ho + (1.0 - hcs) * y_he


# ---------------------------------------------------------------------------
# Step-2 training
# ---------------------------------------------------------------------------


@dataclass
class Step2Hyper:
    alpha: float = 0.75
    beta: float = 0.9
    smooth_steps: int = 3  # propagated feature stack depth
    message_layers: int = 2
    epochs: int = 100
    lr: float = 0.01
    weight_decay: float = 5e-4
    hidden: int = 64
    knowledge_scale: str | float = 1.0  # numeric, or "hcs"
    kappa: float = 0.5
    lp_steps: int = 5
    mask_prob: float = 0.5
    dense_cap: int = 8000
    seed: int = 0


@dataclass
class EpochTrace:
    epoch: int
    loss: float
    val_acc: float | None
    test_acc: float | None


@dataclass
class Step2Result:
    client_id: int
    hcs: float
    extractor_acc: float | None
    adafgl_acc: float | None
    best_val_acc: float | None
    trace: list[EpochTrace]
    y_final: np.ndarray | None = None  # combined prediction at the reported epoch
    y_homo: np.ndarray | None = None  # homophilous-branch prediction at that epoch


def step2_train(
    sub: ClientSubgraph, extractor: nn.ModelState, hyper: Step2Hyper
) -> Step2Result:
    """Personalized training of one client on top of the frozen extractor."""
    g = sub.graph
    p_tilde, p_hat = optimize_topology(sub, extractor, hyper.alpha, hyper.dense_cap)
    seeds = np.random.SeedSequence(hyper.seed).spawn(4)
    hcs_report = compute_hcs(
        sub, hyper.kappa, hyper.lp_steps, hyper.mask_prob, seed=seeds[0]
    )
    hcs = hcs_report.hcs
    scale = hcs if hyper.knowledge_scale == "hcs" else float(hyper.knowledge_scale)

    stack = propagate_stack(p_tilde, g.features, hyper.smooth_steps)
    classes = g.num_classes
    theta_k = nn.init_mlp(
        [stack.shape[1], hyper.hidden, classes], np.random.default_rng(seeds[1]), prefix="k_"
    )
    theta_f = nn.init_mlp(
        [g.features.shape[1], hyper.hidden, classes], np.random.default_rng(seeds[2]), prefix="f_"
    )
    theta_m = init_message_layers(classes, hyper.message_layers, np.random.default_rng(seeds[3]))
    hetero_state = HeteroState(theta_f, theta_m, hyper.beta, hyper.message_layers)
    trainable = nn.ModelState(
        theta_k.params + theta_f.params + theta_m.params, {"arch": "step2"}
    )
    optimizer = nn.Adam(lr=hyper.lr, weight_decay=hyper.weight_decay)

    extractor_acc = nn.accuracy(p_hat, g.labels, g.test_mask) if g.test_mask.any() else None

    def forward():
        h_tilde, k_cache = nn.mlp_forward(stack, theta_k)
        y_ho = homo_forward(h_tilde, p_hat)
        y_he, h_cache = hetero_forward(sub, h_tilde, p_tilde, hetero_state)
        y = adaptive_combine(y_ho, y_he, hcs)
        return h_tilde, k_cache, y_ho, y_he, h_cache, y

    def evaluate(y):
        val = nn.accuracy(y, g.labels, g.val_mask) if g.val_mask.any() else None
        test = nn.accuracy(y, g.labels, g.test_mask) if g.test_mask.any() else None
        return val, test

    best_val = -1.0
    best_test = None
    best_y = None
    best_y_ho = None
    trace: list[EpochTrace] = []
    for epoch in range(hyper.epochs):
        h_tilde, k_cache, y_ho, y_he, h_cache, y = forward()
        ce, grad_y = nn.softmax_cross_entropy(y, g.labels, g.train_mask, from_logits=False)
        kp, grad_h_kp = knowledge_preserving_loss(h_tilde, p_hat)
        loss = ce + scale * kp

        s_k_homo = nn.softmax(h_tilde)
        grad_y_ho = hcs * grad_y
        grad_y_he = (1.0 - hcs) * grad_y
        grad_h_tilde = nn.softmax_backward(s_k_homo, grad_y_ho / 2.0)
        grad_h_tilde += hetero_backward(hetero_state, h_cache, grad_y_he)
        grad_h_tilde += scale * grad_h_kp
        nn.mlp_backward(theta_k, k_cache, grad_h_tilde)
        optimizer.step(trainable)

        val, test = evaluate(y)
        trace.append(EpochTrace(epoch=epoch, loss=loss, val_acc=val, test_acc=test))
        selector = val if val is not None else nn.accuracy(y, g.labels, g.train_mask)
        if selector is not None and selector > best_val:
            best_val = selector
            best_test = test
            best_y = y
            best_y_ho = y_ho

    if hyper.epochs == 0:  # untrained combination, recorded as a smoke value
        _, _, y_ho, _, _, y = forward()
        val, test = evaluate(y)
        trace.append(EpochTrace(epoch=0, loss=float("nan"), val_acc=val, test_acc=test))
        best_val = val if val is not None else -1.0
        best_test = test
        best_y = y
        best_y_ho = y_ho

    return Step2Result(
        client_id=sub.client_id,
        hcs=hcs,
        extractor_acc=extractor_acc,
        adafgl_acc=best_test,
        best_val_acc=None if best_val < 0 else best_val,
        trace=trace,
        y_final=best_y,
        y_homo=best_y_ho,
    )
