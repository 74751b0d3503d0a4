"""Refiner head C over the concatenation [z_G | z_L]."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .exceptions import ConfigError, DivergenceError
from .nn import (
    MLP, AdamW, clip_gradients, dump_checkpoint, load_checkpoint, mlp_backward, mlp_forward,
    softmax, softmax_cross_entropy,
)
from .utils import check_2d, make_rng


def _join(z_G, z_L) -> np.ndarray:
    z_G = check_2d(z_G, what="z_G")
    z_L = check_2d(z_L, what="z_L")
    if z_G.shape[0] != z_L.shape[0]:
        raise ValueError("z_G and z_L disagree on row count")
    return np.hstack([z_G, z_L])


def refine_predict(model: MLP, z_G, z_L) -> np.ndarray:
    out, _ = mlp_forward(model, _join(z_G, z_L))
    return softmax(out)


def refiner_loss_grad(model: MLP, z_G, z_L, y, weight: float | None = None, dropout_rate=0.0, rng=None):
    """Summed cross-entropy times ``weight`` (default 1/len(y)) and its parameter gradients.

    Returns ``(per_node_losses, grads)``; inputs are constants, no gradient leaves C.
    """
    X = _join(z_G, z_L)
    out, cache = mlp_forward(model, X, dropout_rate, rng)
    losses, dlogits = softmax_cross_entropy(out, np.asarray(y))
    w = 1.0 / len(losses) if weight is None else weight
    grads, _ = mlp_backward(model, cache, dlogits * w)
    return losses, grads


class Refiner(BaseEstimator):
    """Two-layer MLP C mapping [z_G | z_L] to class probabilities.

    Trained incrementally by ``step`` inside the routing loop; ``fit`` runs plain
    epochs over a fixed dataset when C is used on its own.
    """

    def __init__(self, hidden=128, learning_rate=1e-3, weight_decay=1e-4, clip_norm=1.0,
                 dropout_rate=0.0, seed=0):
        self.hidden = hidden
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.clip_norm = clip_norm
        self.dropout_rate = dropout_rate
        self.seed = seed

    def initialize(self, gnn_dim: int, llm_dim: int, num_classes: int) -> Refiner:
        self.rng_ = make_rng(self.seed, "refiner")
        self.model_ = MLP.init([gnn_dim + llm_dim, self.hidden, num_classes], self.rng_)
        self.optimizer_ = AdamW(self.learning_rate, self.weight_decay)
        self.dims_ = (gnn_dim, llm_dim)
        return self

    def predict_proba(self, z_G, z_L) -> np.ndarray:
        check_is_fitted(self, "model_")
        return refine_predict(self.model_, z_G, z_L)

    def predict(self, z_G, z_L) -> np.ndarray:
        return np.argmax(self.predict_proba(z_G, z_L), axis=1)

    def step(self, z_G, z_L, y, weight: float | None = None) -> float:
        """One clipped AdamW update of C; returns the mean loss before the update."""
        check_is_fitted(self, "model_")
        rng = self.rng_ if self.dropout_rate > 0 else None
        losses, grads = refiner_loss_grad(self.model_, z_G, z_L, y, weight, self.dropout_rate, rng)
        mean = float(losses.mean())
        if not np.isfinite(mean):
            raise DivergenceError("refiner loss is not finite")
        self.optimizer_.step(self.model_.params(), clip_gradients(grads, self.clip_norm))
        return mean

    def fit(self, z_G, z_L, y, steps=300, num_classes=None):
        z_G, z_L = check_2d(z_G), check_2d(z_L)
        C = num_classes or int(np.max(y)) + 1
        self.initialize(z_G.shape[1], z_L.shape[1], C)
        self.loss_curve_ = [self.step(z_G, z_L, y) for _ in range(steps)]
        return self

    def to_json(self) -> str:
        check_is_fitted(self, "model_")
        header = {"kind": "refiner", "gnn_dim": self.dims_[0], "llm_dim": self.dims_[1]}
        return dump_checkpoint(self.model_.layers, header)

    @classmethod
    def from_json(cls, text: str, **params) -> Refiner:
        header, layers = load_checkpoint(text)
        if header.get("kind") != "refiner":
            raise ConfigError(f"not a refiner checkpoint (kind={header.get('kind')!r})")
        est = cls(hidden=layers[0].out_dim, **params)
        est.model_ = MLP(layers)
        est.dims_ = (header["gnn_dim"], header["llm_dim"])
        est.rng_ = make_rng(est.seed, "refiner")
        est.optimizer_ = AdamW(est.learning_rate, est.weight_decay)
        return est
