"""Minimal differentiable blocks: parameters, GCN/MLP stacks, losses, Adam.

Everything is float64 numpy with handwritten backward passes; the test suite
holds these to central finite differences.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"FGLM"
FORMAT_VERSION = 1


@dataclass
class Parameter:
    name: str
    value: np.ndarray
    grad: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        self.value = np.asarray(self.value, dtype=np.float64)
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        if self.grad.shape != self.value.shape:
            raise ValueError(f"grad shape mismatch for {self.name}")

    def zero_grad(self):
        self.grad.fill(0.0)


@dataclass
class ModelState:
    """Ordered named parameter tensors plus architecture metadata."""

    params: list[Parameter]
    meta: dict

    def param(self, name: str) -> Parameter:
        for p in self.params:
            if p.name == name:
                return p
        raise KeyError(name)

    def values(self) -> list[np.ndarray]:
        return [p.value for p in self.params]

    def copy(self) -> "ModelState":
        return ModelState(
            params=[Parameter(p.name, p.value.copy(), p.grad.copy()) for p in self.params],
            meta=json.loads(json.dumps(self.meta)),
        )

    def compatible_with(self, other: "ModelState") -> bool:
        if self.meta != other.meta or len(self.params) != len(other.params):
            return False
        return all(
            a.name == b.name and a.value.shape == b.value.shape
            for a, b in zip(self.params, other.params)
        )

    def zero_grads(self):
        for p in self.params:
            p.zero_grad()

    def to_bytes(self) -> bytes:
        out = [MAGIC, struct.pack("<B", FORMAT_VERSION)]
        meta = json.dumps(self.meta, sort_keys=True).encode("utf-8")
        out.append(struct.pack("<I", len(meta)))
        out.append(meta)
        out.append(struct.pack("<I", len(self.params)))
        for p in self.params:
            name = p.name.encode("utf-8")
            rows, cols = _as_2d_shape(p.value)
            out.append(struct.pack("<H", len(name)))
            out.append(name)
            out.append(struct.pack("<II", rows, cols))
            out.append(p.value.astype("<f8").tobytes())
        return b"".join(out)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "ModelState":
        view = memoryview(blob)
        if bytes(view[:4]) != MAGIC:
            raise ValueError("not a model state blob")
        if view[4] != FORMAT_VERSION:
            raise ValueError(f"unsupported model format version {view[4]}")
        pos = 5
        (meta_len,) = struct.unpack_from("<I", view, pos)
        pos += 4
        meta = json.loads(bytes(view[pos : pos + meta_len]).decode("utf-8"))
        pos += meta_len
        (count,) = struct.unpack_from("<I", view, pos)
        pos += 4
        params = []
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", view, pos)
            pos += 2
            name = bytes(view[pos : pos + name_len]).decode("utf-8")
            pos += name_len
            rows, cols = struct.unpack_from("<II", view, pos)
            pos += 8
            nbytes = rows * cols * 8
            value = np.frombuffer(view[pos : pos + nbytes], dtype="<f8").reshape(rows, cols).copy()
            pos += nbytes
            params.append(Parameter(name, value))
        return cls(params=params, meta=meta)


def _as_2d_shape(value: np.ndarray) -> tuple[int, int]:
    if value.ndim != 2:
        raise ValueError("parameters are stored as 2-D matrices")
    return value.shape


def glorot(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (rows + cols))
    return rng.uniform(-limit, limit, size=(rows, cols))


def init_gcn(
    num_features: int,
    hidden: int,
    num_classes: int,
    seed: int | np.random.Generator,
    norm_exponent: float = 0.5,
) -> ModelState:
    """Two-layer bias-free graph convolution stack (features -> hidden -> classes)."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    params = [
        Parameter("w1", glorot(rng, num_features, hidden)),
        Parameter("w2", glorot(rng, hidden, num_classes)),
    ]
    meta = {
        "arch": "gcn",
        "dims": [num_features, hidden, num_classes],
        "activation": "relu",
        "norm_exponent": norm_exponent,
    }
    return ModelState(params, meta)


def init_mlp(dims: list[int], seed: int | np.random.Generator, prefix: str = "") -> ModelState:
    """ReLU MLP with biases; no activation after the final layer."""
    if len(dims) < 2:
        raise ValueError("an MLP needs at least one layer")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    params = []
    for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
        params.append(Parameter(f"{prefix}w{i}", glorot(rng, fan_in, fan_out)))
        params.append(Parameter(f"{prefix}b{i}", np.zeros((1, fan_out))))
    meta = {"arch": "mlp", "dims": list(dims), "activation": "relu", "prefix": prefix}
    return ModelState(params, meta)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def softmax(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax_backward(softmax_out: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    """Vector-Jacobian product of row softmax at the given output."""
    inner = (grad_out * softmax_out).sum(axis=1, keepdims=True)
    return softmax_out * (grad_out - inner)


def gcn_forward(
    adj_norm: np.ndarray,
    x: np.ndarray,
    state: ModelState,
    ax: np.ndarray | None = None,
) -> tuple[np.ndarray, dict]:
    """Logits of the 2-layer graph convolution; `ax` may carry a cached adj_norm @ x."""
    if state.meta.get("arch") != "gcn":
        raise ValueError("state does not describe a gcn")
    w1 = state.param("w1").value
    w2 = state.param("w2").value
    if x.shape[1] != w1.shape[0] or w1.shape[1] != w2.shape[0]:
        raise ValueError("gcn shape mismatch")
    if ax is None:
        ax = adj_norm @ x
    z1 = ax @ w1
    h1 = relu(z1)
    ah1 = adj_norm @ h1
    logits = ah1 @ w2
    return logits, {"adj": adj_norm, "ax": ax, "z1": z1, "ah1": ah1}


def gcn_backward(state: ModelState, cache: dict, grad_logits: np.ndarray) -> None:
    """Accumulate weight gradients for gcn_forward's cached pass."""
    w2 = state.param("w2").value
    state.param("w2").grad += cache["ah1"].T @ grad_logits
    dh1 = (cache["adj"].T @ grad_logits) @ w2.T
    dz1 = dh1 * (cache["z1"] > 0)
    state.param("w1").grad += cache["ax"].T @ dz1


def mlp_forward(x: np.ndarray, state: ModelState) -> tuple[np.ndarray, dict]:
    """Forward through the ReLU MLP; returns output and a backward cache."""
    if state.meta.get("arch") != "mlp":
        raise ValueError("state does not describe an mlp")
    dims = state.meta["dims"]
    prefix = state.meta.get("prefix", "")
    layers = len(dims) - 1
    inputs, preacts = [], []
    h = x
    for i in range(layers):
        w = state.param(f"{prefix}w{i}").value
        b = state.param(f"{prefix}b{i}").value
        if h.shape[1] != w.shape[0]:
            raise ValueError(f"mlp layer {i} shape mismatch")
        inputs.append(h)
        z = h @ w + b
        preacts.append(z)
        h = relu(z) if i < layers - 1 else z
    return h, {"inputs": inputs, "preacts": preacts, "layers": layers, "prefix": prefix}


def mlp_backward(state: ModelState, cache: dict, grad_out: np.ndarray) -> np.ndarray:
    """Accumulate MLP gradients; returns the gradient w.r.t. the input."""
    prefix = cache["prefix"]
    g = grad_out
    for i in reversed(range(cache["layers"])):
        if i < cache["layers"] - 1:
            g = g * (cache["preacts"][i] > 0)
        w = state.param(f"{prefix}w{i}")
        b = state.param(f"{prefix}b{i}")
        w.grad += cache["inputs"][i].T @ g
        b.grad += g.sum(axis=0, keepdims=True)
        g = g @ w.value.T
    return g


PROB_FLOOR = 1e-12


def softmax_cross_entropy(
    values: np.ndarray,
    labels: np.ndarray,
    mask: np.ndarray,
    from_logits: bool = True,
) -> tuple[float, np.ndarray]:
    """Mean NLL over masked rows and its gradient w.r.t. `values`.

    With from_logits the softmax is applied internally; otherwise rows are
    treated as probabilities (mixture outputs) and logged directly, floored
    at 1e-12.
    """
    mask = np.asarray(mask, dtype=bool)
    k = int(mask.sum())
    if k == 0:
        raise ValueError("cross entropy needs at least one supervised row")
    rows = values[mask]
    y = labels[mask]
    grad = np.zeros_like(values)
    if from_logits:
        shifted = rows - rows.max(axis=1, keepdims=True)
        logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        log_probs = shifted - logz
        loss = -float(log_probs[np.arange(k), y].mean())
        p = np.exp(log_probs)
        p[np.arange(k), y] -= 1.0
        grad[mask] = p / k
    else:
        py = rows[np.arange(k), y]
        floored = np.maximum(py, PROB_FLOOR)
        loss = -float(np.log(floored).mean())
        rows_grad = np.zeros_like(rows)
        live = py >= PROB_FLOOR
        rows_grad[np.arange(k)[live], y[live]] = -1.0 / (floored[live] * k)
        grad[mask] = rows_grad
    return loss, grad


def frobenius_loss(a: np.ndarray, b: np.ndarray) -> tuple[float, np.ndarray]:
    """||a - b||_F and its gradient w.r.t. `a` (zero at a == b)."""
    if a.shape != b.shape:
        raise ValueError("frobenius_loss needs matching shapes")
    diff = a - b
    norm = float(np.sqrt((diff * diff).sum()))
    grad = diff / norm if norm > 0 else np.zeros_like(a)
    return norm, grad


def accuracy(scores: np.ndarray, labels: np.ndarray, mask: np.ndarray) -> float:
    """Argmax accuracy over masked rows; ties resolve to the lowest class index."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return 0.0
    pred = np.argmax(scores[mask], axis=1)
    return float((pred == labels[mask]).mean())


class Adam:
    """Adam with coupled L2 weight decay; moments keyed by parameter name."""

    def __init__(
        self,
        lr: float = 0.01,
        weight_decay: float = 5e-4,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, model: ModelState) -> None:
        """Apply one update from the accumulated grads, then zero them."""
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for p in model.params:
            g = p.grad + self.weight_decay * p.value
            m = self.m.setdefault(p.name, np.zeros_like(p.value))
            v = self.v.setdefault(p.name, np.zeros_like(p.value))
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.value -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.zero_grad()
