"""Small dense numeric kernel: MLPs with analytic backward passes, softmax
cross-entropy, inverted dropout, AdamW and global-norm gradient clipping.

Everything is float64. Gradients are written out by hand; there is no tape.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field

import numpy as np

from .exceptions import ConfigError
from .utils import check_2d, check_finite

DTYPE = np.float64
ACTIVATIONS = ("relu", "identity")
CHECKPOINT_SCHEMA = 1


@dataclass
class Layer:
    weight: np.ndarray  # (in, out)
    bias: np.ndarray | None  # (out,) or None
    activation: str = "identity"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        self.weight = np.asarray(self.weight, dtype=DTYPE)
        if self.bias is not None:
            self.bias = np.asarray(self.bias, dtype=DTYPE)
            if self.bias.shape != (self.weight.shape[1],):
                raise ValueError("bias length must equal weight columns")

    @property
    def in_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[1]


@dataclass
class MLP:
    layers: list[Layer]

    def __post_init__(self):
        if not self.layers:
            raise ValueError("an MLP needs at least one layer")
        for a, b in zip(self.layers, self.layers[1:]):
            if a.out_dim != b.in_dim:
                raise ValueError(f"layer dims do not chain: {a.out_dim} -> {b.in_dim}")
        if self.layers[-1].activation != "identity":
            raise ValueError("final layer must be linear; softmax belongs to the loss")

    @classmethod
    def init(cls, sizes, rng: np.random.Generator, bias: bool = True) -> MLP:
        """Glorot-uniform weights, zero biases, relu between layers."""
        layers = []
        for i, (fan_in, fan_out) in enumerate(zip(sizes, sizes[1:])):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            W = rng.uniform(-limit, limit, size=(fan_in, fan_out))
            b = np.zeros(fan_out) if bias else None
            act = "identity" if i == len(sizes) - 2 else "relu"
            layers.append(Layer(W, b, act))
        return cls(layers)

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    def params(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out.append(layer.weight)
            if layer.bias is not None:
                out.append(layer.bias)
        return out

    def copy(self) -> MLP:
        return copy.deepcopy(self)


@dataclass
class MLPCache:
    inputs: list[np.ndarray] = field(default_factory=list)  # input to each layer (post-dropout)
    pre: list[np.ndarray] = field(default_factory=list)  # pre-activation of each layer
    masks: list[np.ndarray | None] = field(default_factory=list)  # dropout mask on each layer's input
    n_layers: int = 0


def relu(x):
    return np.maximum(x, 0.0)


def dropout_apply(X, rate: float, rng: np.random.Generator | None):
    """Inverted dropout. Returns ``(masked, mask)``; survivors are scaled by 1/(1-rate)."""
    if not 0.0 <= rate < 1.0:
        raise ValueError("dropout rate must be in [0, 1)")
    X = np.asarray(X, dtype=DTYPE)
    if rng is None or rate == 0.0:
        mask = np.ones_like(X)
        return X.copy(), mask
    keep = rng.random(X.shape) >= rate
    mask = keep.astype(DTYPE) / (1.0 - rate)
    return X * mask, mask


def mlp_forward(model: MLP, X, dropout_rate: float = 0.0, rng: np.random.Generator | None = None):
    """Forward pass. Dropout hits hidden activations only, and only when ``rng`` is given."""
    X = check_2d(X, model.in_dim)
    cache = MLPCache(n_layers=len(model.layers))
    h = X
    for i, layer in enumerate(model.layers):
        mask = None
        if i > 0 and rng is not None and dropout_rate > 0.0:
            h, mask = dropout_apply(h, dropout_rate, rng)
        cache.inputs.append(h)
        cache.masks.append(mask)
        z = h @ layer.weight
        if layer.bias is not None:
            z = z + layer.bias
        cache.pre.append(z)
        h = relu(z) if layer.activation == "relu" else z
    check_finite(h, "MLP output")
    return h, cache


def mlp_backward(model: MLP, cache: MLPCache, grad_output):
    """Exact backward pass. Returns ``(grads, grad_input)`` with grads aligned to ``model.params()``."""
    if cache.n_layers != len(model.layers):
        raise ValueError("cache does not belong to this model")
    g = np.asarray(grad_output, dtype=DTYPE)
    rev = []
    for i in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[i]
        if layer.activation == "relu":
            g = g * (cache.pre[i] > 0)
        x = cache.inputs[i]
        if x.shape[1] != layer.in_dim or g.shape[1] != layer.out_dim:
            raise ValueError("cache does not match model dimensions")
        dW = x.T @ g
        if layer.bias is not None:
            rev.append(g.sum(axis=0))
        rev.append(dW)
        g = g @ layer.weight.T
        if cache.masks[i] is not None:
            g = g * cache.masks[i]
    return rev[::-1], g


def softmax(logits):
    z = np.asarray(logits, dtype=DTYPE)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits):
    z = np.asarray(logits, dtype=DTYPE)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax_cross_entropy(logits, labels):
    """Per-row ``-log softmax(logits)[label]`` and its gradient ``softmax - onehot``.

    Accepts a single logit vector with an int label, or an ``(n, C)`` batch with
    ``(n,)`` labels. No probability floor is applied.
    """
    logits = np.asarray(logits, dtype=DTYPE)
    single = logits.ndim == 1
    Z = logits[None, :] if single else logits
    y = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    check_finite(Z, "logits")
    if y.shape[0] != Z.shape[0]:
        raise ValueError("one label per logit row required")
    if y.size and (y.min() < 0 or y.max() >= Z.shape[1]):
        raise ValueError("label out of range")
    logp = log_softmax(Z)
    rows = np.arange(Z.shape[0])
    loss = -logp[rows, y]
    grad = np.exp(logp)
    grad[rows, y] -= 1.0
    if single:
        return float(loss[0]), grad[0]
    return loss, grad


def global_norm(grads) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))


def clip_gradients(grads, max_norm: float = 1.0):
    """Scale all gradients jointly so their global l2 norm is at most ``max_norm``."""
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    norm = global_norm(grads)
    if norm <= max_norm:
        return [np.array(g, dtype=DTYPE) for g in grads]
    scale = max_norm / norm
    return [np.asarray(g, dtype=DTYPE) * scale for g in grads]


@dataclass
class AdamW:
    """AdamW with decoupled weight decay. Updates parameter arrays in place."""

    lr: float = 1e-3
    weight_decay: float = 0.0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    step_count: int = 0
    m: list[np.ndarray] | None = None
    v: list[np.ndarray] | None = None

    def step(self, params, grads):
        if len(params) != len(grads):
            raise ValueError("params and grads differ in length")
        if self.m is None:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        for p, g, m in zip(params, grads, self.m):
            if p.shape != np.shape(g) or p.shape != m.shape:
                raise ValueError(f"shape mismatch: param {p.shape}, grad {np.shape(g)}")
        self.step_count += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1**self.step_count
        c2 = 1.0 - b2**self.step_count
        for p, g, m, v in zip(params, grads, self.m, self.v):
            p *= 1.0 - self.lr * self.weight_decay
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return params


def adamw_step(state: AdamW, params, grads):
    return state.step(params, grads)


@dataclass
class TrainConfig:
    learning_rate: float = 1e-2
    weight_decay: float = 1e-4
    max_epochs: int = 1000
    patience: int = 30
    dropout_rate: float = 0.5
    clip_norm: float = 1.0
    batch_size: int = 128
    seed: int = 0

    def __post_init__(self):
        for name in ("learning_rate", "max_epochs", "patience", "clip_norm", "batch_size"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be non-negative")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("dropout_rate must be in [0, 1)")
        if self.patience > self.max_epochs:
            raise ConfigError("patience cannot exceed max_epochs")


# checkpoint IO


def layers_to_json(layers: list[Layer]) -> list[dict]:
    out = []
    for layer in layers:
        out.append(
            {
                "rows": int(layer.in_dim),
                "cols": int(layer.out_dim),
                "w": layer.weight.ravel().tolist(),
                "b": [] if layer.bias is None else layer.bias.tolist(),
                "act": "relu" if layer.activation == "relu" else "id",
            }
        )
    return out


def layers_from_json(records: list[dict]) -> list[Layer]:
    layers = []
    for rec in records:
        W = np.asarray(rec["w"], dtype=DTYPE).reshape(rec["rows"], rec["cols"])
        b = np.asarray(rec["b"], dtype=DTYPE) if rec["b"] else None
        layers.append(Layer(W, b, "relu" if rec["act"] == "relu" else "identity"))
    return layers


def dump_checkpoint(layers: list[Layer], header: dict | None = None) -> str:
    doc = {"schema": CHECKPOINT_SCHEMA, **(header or {}), "layers": layers_to_json(layers)}
    return json.dumps(doc, sort_keys=True)


def load_checkpoint(text: str) -> tuple[dict, list[Layer]]:
    doc = json.loads(text)
    if doc.get("schema") != CHECKPOINT_SCHEMA:
        raise ConfigError(f"unsupported checkpoint schema {doc.get('schema')!r}")
    layers = layers_from_json(doc.pop("layers"))
    return doc, layers
