"""GCN structural expert: encoder, linear prediction head, full-batch training
and Monte-Carlo-dropout uncertainty."""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .exceptions import ConfigError, DivergenceError
from .graph import TextAttributedGraph
from .nn import (
    AdamW, Layer, TrainConfig, clip_gradients, dropout_apply, dump_checkpoint, load_checkpoint,
    relu, softmax, softmax_cross_entropy,
)
from .utils import check_2d, check_finite, make_rng

log = logging.getLogger(__name__)


def normalize_adjacency(g: TextAttributedGraph) -> sp.csr_matrix:
    """Symmetric normalisation with self loops: D^-1/2 (A + I) D^-1/2 in CSR form."""
    n = g.num_nodes
    if len(g.edges):
        rows = np.concatenate([g.edges[:, 0], g.edges[:, 1], np.arange(n)])
        cols = np.concatenate([g.edges[:, 1], g.edges[:, 0], np.arange(n)])
    else:
        rows = cols = np.arange(n)
    A = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
    d_inv_sqrt = 1.0 / np.sqrt(np.asarray(A.sum(axis=1)).ravel())
    D = sp.diags(d_inv_sqrt)
    return (D @ A @ D).tocsr()


@dataclass
class GcnModel:
    weights: list[np.ndarray]  # encoder weights, no biases
    head: Layer  # hidden -> num_classes, with bias

    @classmethod
    def init(cls, in_dim, hidden, num_classes, n_layers, rng) -> GcnModel:
        if n_layers < 1:
            raise ConfigError("a GCN needs at least one layer")
        dims = [in_dim] + [hidden] * n_layers
        weights = []
        for a, b in zip(dims, dims[1:]):
            lim = np.sqrt(6.0 / (a + b))
            weights.append(rng.uniform(-lim, lim, size=(a, b)))
        lim = np.sqrt(6.0 / (hidden + num_classes))
        head = Layer(rng.uniform(-lim, lim, size=(hidden, num_classes)), np.zeros(num_classes))
        return cls(weights, head)

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def hidden(self) -> int:
        return self.weights[-1].shape[1]

    @property
    def num_classes(self) -> int:
        return self.head.out_dim

    def params(self) -> list[np.ndarray]:
        return [*self.weights, self.head.weight, self.head.bias]

    def to_json(self) -> str:
        layers = [Layer(W, None, "relu" if i < self.n_layers - 1 else "identity")
                  for i, W in enumerate(self.weights)]
        header = {"kind": "gcn", "depth": self.n_layers, "hidden": self.hidden}
        return dump_checkpoint(layers + [self.head], header)

    @classmethod
    def from_json(cls, text: str) -> GcnModel:
        header, layers = load_checkpoint(text)
        if header.get("kind") != "gcn":
            raise ConfigError(f"not a gcn checkpoint (kind={header.get('kind')!r})")
        return cls([l.weight for l in layers[:-1]], layers[-1])


@dataclass
class GcnCache:
    inputs: list  # post-dropout input of each encoder layer
    propagated: list  # A_hat @ input
    pre: list
    masks: list
    head_input: np.ndarray
    head_mask: np.ndarray | None


def gcn_forward(model: GcnModel, A_hat, X, dropout_rate: float = 0.0, rng=None):
    """Returns ``(z_G, logits, cache)``. Dropout on hidden activations only, when ``rng`` is given."""
    X = check_2d(X, model.in_dim)
    use_dropout = rng is not None and dropout_rate > 0
    h = X
    inputs, propagated, pre, masks = [], [], [], []
    for i, W in enumerate(model.weights):
        mask = None
        if i > 0 and use_dropout:
            h, mask = dropout_apply(h, dropout_rate, rng)
        inputs.append(h)
        masks.append(mask)
        P = A_hat @ h
        propagated.append(P)
        a = P @ W
        pre.append(a)
        h = relu(a) if i < model.n_layers - 1 else a
    z = h
    head_in, head_mask = z, None
    if use_dropout:
        head_in, head_mask = dropout_apply(z, dropout_rate, rng)
    logits = head_in @ model.head.weight + model.head.bias
    check_finite(logits, "GCN logits")
    return z, logits, GcnCache(inputs, propagated, pre, masks, head_in, head_mask)


def gcn_backward(model: GcnModel, A_hat, cache: GcnCache, grad_logits):
    """Gradients aligned with ``model.params()``."""
    g = np.asarray(grad_logits, dtype=np.float64)
    d_head_W = cache.head_input.T @ g
    d_head_b = g.sum(axis=0)
    g = g @ model.head.weight.T
    if cache.head_mask is not None:
        g = g * cache.head_mask
    dWs = [None] * model.n_layers
    for i in range(model.n_layers - 1, -1, -1):
        if i < model.n_layers - 1:
            g = g * (cache.pre[i] > 0)
        dWs[i] = cache.propagated[i].T @ g
        # A_hat is symmetric
        g = A_hat @ (g @ model.weights[i].T)
        if cache.masks[i] is not None:
            g = g * cache.masks[i]
    return [*dWs, d_head_W, d_head_b]


def head_predict(model: GcnModel, z_G) -> np.ndarray:
    z = check_2d(z_G, model.hidden, "z_G")
    return softmax(z @ model.head.weight + model.head.bias)


def _accuracy(logits, y) -> float:
    return float(np.mean(np.argmax(logits, axis=1) == y)) if len(y) else 0.0


def gnn_train(g: TextAttributedGraph, config: TrainConfig, n_layers: int = 2, hidden: int = 64):
    """Full-batch training; returns ``(best_val_model, history)``."""
    train, val = g.nodes_in("train"), g.nodes_in("val")
    if len(train) == 0 or len(val) == 0:
        raise ConfigError("GCN training needs non-empty train and val splits")
    A_hat = normalize_adjacency(g)
    rng = make_rng(config.seed, "gnn")
    model = GcnModel.init(g.feature_dim, hidden, g.num_classes, n_layers, rng)
    opt = AdamW(config.learning_rate, config.weight_decay)
    y = g.labels
    best, best_acc, since, history = copy.deepcopy(model), -1.0, 0, []
    for epoch in range(1, config.max_epochs + 1):
        _, logits, cache = gcn_forward(model, A_hat, g.features, config.dropout_rate, rng)
        losses, dlogits = softmax_cross_entropy(logits[train], y[train])
        loss = float(losses.mean())
        if not np.isfinite(loss):
            raise DivergenceError(f"GCN loss diverged at epoch {epoch}", epoch=epoch)
        grad_full = np.zeros_like(logits)
        grad_full[train] = dlogits / len(train)
        grads = clip_gradients(gcn_backward(model, A_hat, cache, grad_full), config.clip_norm)
        opt.step(model.params(), grads)
        _, eval_logits, _ = gcn_forward(model, A_hat, g.features)
        val_acc = _accuracy(eval_logits[val], y[val])
        history.append({"epoch": epoch, "loss": loss, "train_acc": _accuracy(eval_logits[train], y[train]),
                        "val_acc": val_acc})
        if val_acc > best_acc:
            best, best_acc, since = copy.deepcopy(model), val_acc, 0
        else:
            since += 1
            if since >= config.patience:
                break
    log.info("gcn: best val acc %.4f after %d epochs", best_acc, len(history))
    return best, history


def mc_dropout_uncertainty(model: GcnModel, A_hat, X, passes: int = 5, rate: float = 0.3,
                           seed: int = 0, statistic: str = "entropy") -> np.ndarray:
    """Per-node uncertainty in [0, 1] from ``passes`` dropout-perturbed forward passes.

    ``entropy``: normalised entropy of the mean predicted distribution.
    ``disagreement``: 1 - fraction of passes voting for the modal class.
    """
    if passes < 2:
        raise ValueError("MC dropout needs at least two passes")
    probs = []
    for p in range(passes):
        rng = make_rng(seed, "mc-dropout", p)
        _, logits, _ = gcn_forward(model, A_hat, X, rate, rng)
        probs.append(softmax(logits))
    probs = np.stack(probs)
    C = probs.shape[2]
    if statistic == "entropy":
        return normalized_entropy(probs.mean(axis=0))
    if statistic == "disagreement":
        votes = probs.argmax(axis=2)
        counts = np.stack([(votes == c).sum(axis=0) for c in range(C)], axis=1)
        return 1.0 - counts.max(axis=1) / passes
    raise ValueError(f"unknown uncertainty statistic {statistic!r}")


def normalized_entropy(p) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    C = p.shape[-1]
    if C < 2:
        return np.zeros(p.shape[:-1])
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(p), 0.0)
    return np.clip(-terms.sum(axis=-1) / np.log(C), 0.0, 1.0)


class GCNClassifier(ClassifierMixin, BaseEstimator):
    """Frozen structural expert with an sklearn-style interface over a whole graph.

    ``fit(graph)`` trains on the graph's train split and keeps the best-validation
    weights; ``predict``/``predict_proba``/``embed`` score every node of a graph.
    """

    def __init__(self, n_layers=2, hidden=64, learning_rate=1e-2, weight_decay=1e-4,
                 max_epochs=1000, patience=30, dropout_rate=0.5, clip_norm=1.0, seed=0):
        self.n_layers = n_layers
        self.hidden = hidden
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.max_epochs = max_epochs
        self.patience = patience
        self.dropout_rate = dropout_rate
        self.clip_norm = clip_norm
        self.seed = seed

    def _config(self) -> TrainConfig:
        return TrainConfig(self.learning_rate, self.weight_decay, self.max_epochs, self.patience,
                           self.dropout_rate, self.clip_norm, seed=self.seed)

    def fit(self, graph: TextAttributedGraph, y=None):
        if self.n_layers not in (2, 3):
            raise ConfigError("GCN depth must be 2 or 3")
        self.model_, self.history_ = gnn_train(graph, self._config(), self.n_layers, self.hidden)
        self.classes_ = np.arange(graph.num_classes)
        return self

    @classmethod
    def from_model(cls, model: GcnModel, **params) -> GCNClassifier:
        est = cls(n_layers=model.n_layers, hidden=model.hidden, **params)
        est.model_ = model
        est.history_ = []
        est.classes_ = np.arange(model.num_classes)
        return est

    def forward(self, graph: TextAttributedGraph):
        """Deterministic ``(z_G, logits)`` for every node."""
        check_is_fitted(self, "model_")
        z, logits, _ = gcn_forward(self.model_, normalize_adjacency(graph), graph.features)
        return z, logits

    def embed(self, graph):
        return self.forward(graph)[0]

    def predict_proba(self, graph):
        return softmax(self.forward(graph)[1])

    def predict(self, graph):
        return np.argmax(self.forward(graph)[1], axis=1)

    def uncertainty(self, graph, passes=5, rate=0.3, seed=0, statistic="entropy"):
        check_is_fitted(self, "model_")
        return mc_dropout_uncertainty(self.model_, normalize_adjacency(graph), graph.features,
                                      passes, rate, seed, statistic)

    def score(self, graph, y=None, split="test"):
        nodes = graph.nodes_in(split)
        return float(np.mean(self.predict(graph)[nodes] == graph.labels[nodes]))

    def to_json(self) -> str:
        check_is_fitted(self, "model_")
        return self.model_.to_json()
