"""Label-free local homophily estimates from a feature-only MLP classifier Q."""

from __future__ import annotations

import logging

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .exceptions import ConfigError, DivergenceError
from .graph import ISOLATED_SENTINEL, TextAttributedGraph
from .nn import (
    MLP, AdamW, TrainConfig, clip_gradients, dump_checkpoint, load_checkpoint, mlp_backward,
    mlp_forward, softmax, softmax_cross_entropy,
)
from .utils import check_2d, make_rng

log = logging.getLogger(__name__)


def hard_homophily_estimate(g: TextAttributedGraph, probs) -> np.ndarray:
    """Fraction of neighbours whose argmax class matches the node's argmax class."""
    yhat = np.argmax(np.asarray(probs), axis=1)
    deg = g.degrees
    same = np.zeros(g.num_nodes)
    if len(g.edges):
        u, v = g.edges[:, 0], g.edges[:, 1]
        match = (yhat[u] == yhat[v]).astype(np.float64)
        np.add.at(same, u, match)
        np.add.at(same, v, match)
    out = np.full(g.num_nodes, ISOLATED_SENTINEL)
    out[deg > 0] = same[deg > 0] / deg[deg > 0]
    return out


def soft_homophily(g: TextAttributedGraph, probs) -> np.ndarray:
    """Dot product of each node's class distribution with its neighbours' mean distribution."""
    P = np.asarray(probs, dtype=np.float64)
    deg = g.degrees
    acc = np.zeros_like(P)
    if len(g.edges):
        u, v = g.edges[:, 0], g.edges[:, 1]
        np.add.at(acc, u, P[v])
        np.add.at(acc, v, P[u])
    out = np.full(g.num_nodes, ISOLATED_SENTINEL)
    has = deg > 0
    out[has] = np.einsum("ij,ij->i", P[has], acc[has] / deg[has, None])
    return np.clip(out, 0.0, 1.0)


def train_mlp_classifier(X, y, train, val, sizes, config: TrainConfig, stream: str):
    """Full-batch MLP training with best-validation checkpointing."""
    rng = make_rng(config.seed, stream)
    model = MLP.init(sizes, rng)
    opt = AdamW(config.learning_rate, config.weight_decay)
    best, best_acc, since, history = model.copy(), -1.0, 0, []
    for epoch in range(1, config.max_epochs + 1):
        out, cache = mlp_forward(model, X[train], config.dropout_rate, rng)
        losses, dlogits = softmax_cross_entropy(out, y[train])
        loss = float(losses.mean())
        if not np.isfinite(loss):
            raise DivergenceError(f"{stream} loss diverged at epoch {epoch}", epoch=epoch)
        grads, _ = mlp_backward(model, cache, dlogits / len(train))
        opt.step(model.params(), clip_gradients(grads, config.clip_norm))
        val_out, _ = mlp_forward(model, X[val])
        val_acc = float(np.mean(val_out.argmax(axis=1) == y[val]))
        history.append({"epoch": epoch, "loss": loss, "val_acc": val_acc})
        if val_acc > best_acc:
            best, best_acc, since = model.copy(), val_acc, 0
        else:
            since += 1
            if since >= config.patience:
                break
    return best, history


class HomophilyEstimator(BaseEstimator):
    """MLP Q over raw node features; never looks at edges while training.

    After fitting, ``predict_proba`` gives p_Q for any feature matrix, and
    ``hard_homophily``/``soft_homophily`` turn those predictions into per-node
    homophily estimates on a graph.
    """

    def __init__(self, hidden=64, learning_rate=1e-2, weight_decay=1e-4, max_epochs=1000,
                 patience=30, dropout_rate=0.5, clip_norm=1.0, seed=0):
        self.hidden = hidden
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.max_epochs = max_epochs
        self.patience = patience
        self.dropout_rate = dropout_rate
        self.clip_norm = clip_norm
        self.seed = seed

    def fit(self, graph: TextAttributedGraph, y=None):
        train, val = graph.nodes_in("train"), graph.nodes_in("val")
        if len(train) == 0:
            raise ConfigError("Q training needs a non-empty train split")
        if len(val) == 0:
            val = train
        cfg = TrainConfig(self.learning_rate, self.weight_decay, self.max_epochs, self.patience,
                          self.dropout_rate, self.clip_norm, seed=self.seed)
        sizes = [graph.feature_dim, self.hidden, graph.num_classes]
        self.model_, self.history_ = train_mlp_classifier(
            graph.features, graph.labels, train, val, sizes, cfg, "q-estimator")
        self.val_accuracy_ = max(h["val_acc"] for h in self.history_)
        self.num_classes_ = graph.num_classes
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "model_")
        out, _ = mlp_forward(self.model_, check_2d(X, self.model_.in_dim))
        return softmax(out)

    def predict(self, X):
        return np.argmax(self.predict_proba(X), axis=1)

    def hard_homophily(self, graph: TextAttributedGraph) -> np.ndarray:
        return hard_homophily_estimate(graph, self.predict_proba(graph.features))

    def soft_homophily(self, graph: TextAttributedGraph) -> np.ndarray:
        return soft_homophily(graph, self.predict_proba(graph.features))

    def to_json(self) -> str:
        check_is_fitted(self, "model_")
        header = {"kind": "q-estimator", "seed": self.seed,
                  "epochs": len(self.history_), "val_accuracy": self.val_accuracy_}
        return dump_checkpoint(self.model_.layers, header)

    @classmethod
    def from_json(cls, text: str) -> HomophilyEstimator:
        header, layers = load_checkpoint(text)
        if header.get("kind") != "q-estimator":
            raise ConfigError(f"not a q-estimator checkpoint (kind={header.get('kind')!r})")
        est = cls(hidden=layers[0].out_dim, seed=header.get("seed", 0))
        est.model_ = MLP(layers)
        est.history_ = [{"val_acc": header.get("val_accuracy", 0.0)}] * header.get("epochs", 0)
        est.val_accuracy_ = header.get("val_accuracy", 0.0)
        est.num_classes_ = est.model_.out_dim
        return est
