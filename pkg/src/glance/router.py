"""Routing features, the linear-sigmoid routing policy, per-batch top-k
selection, the decaying budget schedule and the router's loss gradient."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .exceptions import ConfigError
from .utils import check_2d, round_half_up

SEGMENTS = ("gnn_embedding", "uncertainty", "homophily", "features", "degree")
SCALAR_SEGMENTS = ("uncertainty", "homophily", "degree")
PROB_CLAMP = 1e-7
STD_FLOOR = 1e-6


@dataclass(frozen=True)
class FeatureLayout:
    segments: tuple[tuple[str, int], ...]

    @property
    def dim(self) -> int:
        return sum(d for _, d in self.segments)

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(name for name, _ in self.segments)

    def offsets(self) -> dict[str, tuple[int, int]]:
        out, start = {}, 0
        for name, d in self.segments:
            out[name] = (start, start + d)
            start += d
        return out

    def to_json(self) -> list:
        return [[name, d] for name, d in self.segments]

    @classmethod
    def from_json(cls, rec) -> FeatureLayout:
        return cls(tuple((str(name), int(d)) for name, d in rec))


def normalize_ablation(drop) -> tuple[str, ...]:
    """Accepts segment names or ``no-<segment>`` flags."""
    out = []
    for name in drop or ():
        name = name[3:] if name.startswith("no-") else name
        if name not in SEGMENTS:
            raise ConfigError(f"unknown routing feature {name!r}; choose from {SEGMENTS}")
        out.append(name)
    return tuple(out)


@dataclass
class FeatureStats:
    """Train-split mean/std of the scalar routing signals."""

    mean: dict = field(default_factory=dict)
    std: dict = field(default_factory=dict)

    @classmethod
    def fit(cls, signals: dict, train_idx) -> FeatureStats:
        stats = cls()
        for name in SCALAR_SEGMENTS:
            vals = np.asarray(signals[name], dtype=np.float64)[train_idx]
            stats.mean[name] = float(vals.mean())
            stats.std[name] = float(max(vals.std(), STD_FLOOR))
        return stats

    def to_json(self) -> dict:
        return {"mean": self.mean, "std": self.std}

    @classmethod
    def from_json(cls, rec) -> FeatureStats:
        return cls(dict(rec["mean"]), dict(rec["std"]))


def assemble_features(z_G, uncertainty, soft_h, x, degree, stats: FeatureStats, drop=()):
    """Returns ``(F, layout)`` with F = [z_G | uncertainty | soft_h | x | degree] minus dropped segments.

    Scalar segments are z-scored with ``stats``; z_G and x pass through unscaled.
    """
    drop = normalize_ablation(drop)
    z_G = check_2d(z_G, what="z_G")
    x = check_2d(x, what="x")
    n = z_G.shape[0]
    parts = {
        "gnn_embedding": z_G,
        "uncertainty": np.asarray(uncertainty, dtype=np.float64).reshape(n, 1),
        "homophily": np.asarray(soft_h, dtype=np.float64).reshape(n, 1),
        "features": x,
        "degree": np.asarray(degree, dtype=np.float64).reshape(n, 1),
    }
    if x.shape[0] != n:
        raise ValueError("z_G and x disagree on node count")
    cols, segments = [], []
    for name in SEGMENTS:
        if name in drop:
            continue
        block = parts[name]
        if name in SCALAR_SEGMENTS:
            block = (block - stats.mean[name]) / stats.std[name]
        cols.append(block)
        segments.append((name, block.shape[1]))
    layout = FeatureLayout(tuple(segments))
    if not cols:
        return np.zeros((n, 0)), layout
    return np.hstack(cols), layout


@dataclass
class RouterPolicy:
    weight: np.ndarray
    bias: np.ndarray | float = 0.0  # stored as a length-1 array so optimisers can update it in place
    layout: FeatureLayout | None = None

    def __post_init__(self):
        self.weight = np.array(self.weight, dtype=np.float64)
        self.bias = np.array(self.bias, dtype=np.float64).reshape(1)

    @classmethod
    def zeros(cls, layout: FeatureLayout) -> RouterPolicy:
        return cls(np.zeros(layout.dim), 0.0, layout)

    def params(self) -> list[np.ndarray]:
        return [self.weight, self.bias]

    @property
    def b(self) -> float:
        return float(self.bias[0])

    def logits(self, F) -> np.ndarray:
        F = check_2d(F, self.weight.shape[0], "routing features")
        return F @ self.weight + self.b

    def to_json(self) -> str:
        layout = self.layout.to_json() if self.layout is not None else []
        return json.dumps({"schema": 1, "layout": layout, "w": self.weight.tolist(), "b": self.b},
                          sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> RouterPolicy:
        doc = json.loads(text)
        if doc.get("schema") != 1:
            raise ConfigError("unsupported router checkpoint schema")
        return cls(np.asarray(doc["w"], dtype=np.float64), float(doc["b"]), FeatureLayout.from_json(doc["layout"]))


def route_score(policy: RouterPolicy, F) -> np.ndarray:
    """Routing probability a_v = sigmoid(w.f_v + b)."""
    return expit(policy.logits(F))


def select_topk(scores, K: int) -> np.ndarray:
    """Positions of the K highest scores (ties to the lower position), ascending."""
    scores = np.asarray(scores, dtype=np.float64)
    if K < 0:
        raise ValueError("K must be non-negative")
    idx = np.arange(len(scores))
    order = np.lexsort((idx, -scores))
    return np.sort(order[:min(K, len(scores))])


@dataclass(frozen=True)
class BudgetSchedule:
    k_start: int = 32
    k_end: int = 8
    decay: float = 0.5
    k_test: int = 12

    def validate(self, batch_size: int) -> BudgetSchedule:
        if not 1 <= self.k_end <= self.k_start <= batch_size:
            raise ConfigError("need 1 <= k_end <= k_start <= batch_size")
        if not 0.0 < self.decay < 1.0:
            raise ConfigError("decay must lie in (0, 1)")
        if self.k_test < 0:
            raise ConfigError("k_test must be non-negative")
        return self


def schedule_k(schedule: BudgetSchedule, epoch: int) -> int:
    """K_t = round(K_end + (K_start - K_end) * r^(t-1)), rounding halves up."""
    if epoch < 1:
        raise ValueError("epochs are numbered from 1")
    s = schedule
    return round_half_up(s.k_end + (s.k_start - s.k_end) * s.decay ** (epoch - 1))


def router_loss(logits, rewards, lambda_ent: float, routed=None, mode: str = "as_written"):
    """Per-node router loss and its derivative with respect to the logit.

    ``as_written``: -r log a - lambda_ent * H(a) for every node.
    ``action``: routed nodes as above, non-routed nodes use -r log(1 - a).
    The probability is clamped to [1e-7, 1 - 1e-7] before any log.
    """
    z = np.asarray(logits, dtype=np.float64)
    r = np.asarray(rewards, dtype=np.float64)
    a = np.clip(expit(z), PROB_CLAMP, 1.0 - PROB_CLAMP)
    ent = -(a * np.log(a) + (1 - a) * np.log(1 - a))
    d_ent = lambda_ent * a * (1 - a) * np.log(a / (1 - a))
    if mode == "as_written":
        loss = -r * np.log(a) - lambda_ent * ent
        dz = -r * (1 - a) + d_ent
    elif mode == "action":
        routed = np.ones(z.shape, dtype=bool) if routed is None else np.asarray(routed, dtype=bool)
        loss = np.where(routed, -r * np.log(a), -r * np.log(1 - a)) - lambda_ent * ent
        dz = np.where(routed, -r * (1 - a), r * a) + d_ent
    else:
        raise ValueError(f"unknown router loss mode {mode!r}")
    return loss, dz


def router_loss_grad(policy: RouterPolicy, f, r, lambda_ent: float, routed=True, mode: str = "as_written"):
    """Loss and gradient w.r.t. (w, bias) for one node's features ``f``."""
    f = np.asarray(f, dtype=np.float64).ravel()
    z = float(f @ policy.weight + policy.b)
    loss, dz = router_loss(np.array([z]), np.array([r]), lambda_ent, np.array([routed]), mode)
    return float(loss[0]), f * dz[0], float(dz[0])
