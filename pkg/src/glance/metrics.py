"""Evaluation: net correction score, homophily-stratified accuracy, average
rank, static routing heuristics and the report table."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata
from sklearn.cluster import KMeans

from .exceptions import ConfigError
from .graph import BIN_EDGES, stratify_bins
from .utils import make_rng

log = logging.getLogger(__name__)


# kind -> which end of the metric gets routed first
HEURISTICS = {
    "random": None,
    "c_density": "lowest",
    "degree": "lowest",
    "uncertainty": "highest",
    "soft_h": "lowest",
    "rel_degree": "lowest",
    "true_h": "lowest",
}
ORACLE_HEURISTICS = ("true_h",)


def _as_mask(routed, n: int) -> np.ndarray:
    routed = np.asarray(routed)
    if routed.dtype == bool:
        if routed.shape != (n,):
            raise ValueError("routed mask length mismatch")
        return routed
    mask = np.zeros(n, dtype=bool)
    mask[routed.astype(np.int64)] = True
    return mask


def ncs(gnn_correct, post_correct, routed) -> float:
    """(|wrong->correct| - |correct->wrong|) / |routed|."""
    gnn_correct = np.asarray(gnn_correct, dtype=bool)
    post_correct = np.asarray(post_correct, dtype=bool)
    mask = _as_mask(routed, len(gnn_correct))
    if not mask.any():
        raise ValueError("NCS is undefined for an empty routed set")
    wc = np.sum(mask & ~gnn_correct & post_correct)
    cw = np.sum(mask & gnn_correct & ~post_correct)
    return float((wc - cw) / mask.sum())


def c_density(features, num_classes: int, seed: int = 0) -> np.ndarray:
    """1 / (1 + distance to the nearest k-means centroid); low means sparse regions."""
    X = np.asarray(features, dtype=np.float64)
    if len(X) == 0:
        return np.zeros(0)
    if np.allclose(X, X[0]):
        log.warning("c_density: all feature vectors are identical; returning uniform scores")
        return np.ones(len(X))
    k = max(1, min(num_classes, len(np.unique(X, axis=0))))
    km = KMeans(n_clusters=k, init="k-means++", n_init=1, max_iter=50, random_state=seed).fit(X)
    dist = np.min(km.transform(X), axis=1)
    return 1.0 / (1.0 + dist)


@dataclass(frozen=True)
class HeuristicRouter:
    kind: str
    fraction: float
    direction: str | None = None

    def __post_init__(self):
        if self.kind not in HEURISTICS:
            raise ConfigError(f"unknown heuristic {self.kind!r}")
        if not 0.0 < self.fraction <= 1.0:
            raise ConfigError("routing fraction must lie in (0, 1]")
        if self.direction is None:
            object.__setattr__(self, "direction", HEURISTICS[self.kind])


def n_routed(fraction: float, n_eval: int) -> int:
    return int(math.floor(fraction * n_eval + 1e-9))


def heuristic_route(nodes, metrics: dict, heuristic: HeuristicRouter, seed: int = 0,
                    allow_oracle: bool = False) -> np.ndarray:
    """Route floor(fraction * |nodes|) of ``nodes`` by the heuristic's metric.

    ``metrics`` maps metric name to a full-graph per-node array. Ties go to the
    smaller node id.
    """
    nodes = np.sort(np.asarray(nodes, dtype=np.int64))
    k = n_routed(heuristic.fraction, len(nodes))
    if heuristic.kind in ORACLE_HEURISTICS and not allow_oracle:
        raise ConfigError("true_h reads labels; enable oracle evaluation to use it")
    if heuristic.kind == "random":
        rng = make_rng(seed, "heuristic-random")
        return np.sort(rng.choice(nodes, size=k, replace=False))
    if heuristic.kind not in metrics:
        raise ConfigError(f"heuristic {heuristic.kind!r} needs metric {heuristic.kind!r}")
    vals = np.asarray(metrics[heuristic.kind], dtype=np.float64)[nodes]
    key = vals if heuristic.direction == "lowest" else -vals
    order = np.lexsort((nodes, key))
    return np.sort(nodes[order[:k]])


def stratified_accuracy(predictions, labels, h_values, edges=BIN_EDGES):
    """Accuracy per homophily bin. Empty bins map to None rather than 0."""
    pred = np.asarray(predictions)
    y = np.asarray(labels)
    h = np.asarray(h_values, dtype=np.float64)
    if not len(pred) == len(y) == len(h):
        raise ValueError("predictions, labels and homophily values must align")
    bins = stratify_bins(h, edges)
    acc, pop = [], []
    for b in range(len(edges) - 1):
        sel = bins == b
        pop.append(int(sel.sum()))
        acc.append(float(np.mean(pred[sel] == y[sel])) if sel.any() else None)
    return acc, pop


def average_rank(table: dict) -> dict:
    """Mean rank per method over settings (columns). Rank 1 is the highest score;
    ties share the mean of their ranks; None cells drop out of that setting."""
    if not table:
        raise ValueError("empty score table")
    methods = list(table)
    n_settings = {len(v) for v in table.values()}
    if len(n_settings) != 1:
        raise ValueError("every method needs the same number of settings")
    ranks = {m: [] for m in methods}
    for s in range(n_settings.pop()):
        present = [m for m in methods if table[m][s] is not None]
        if not present:
            continue
        r = rankdata([-float(table[m][s]) for m in present], method="average")
        for m, rv in zip(present, r):
            ranks[m].append(float(rv))
    return {m: (float(np.mean(v)) if v else None) for m, v in ranks.items()}


def _hist(values, bins=10):
    counts, _ = np.histogram(values, bins=bins, range=(0.0, 1.0))
    return counts.tolist()


def routed_homophily_summary(h_routed, benefited) -> dict:
    """Median and 10-bin histogram of routed nodes' homophily, split by benefit."""
    h = np.asarray(h_routed, dtype=np.float64)
    ben = np.asarray(benefited, dtype=bool)
    if len(h) == 0:
        raise ValueError("routed set is empty")
    out = {}
    for name, sel in (("benefited", ben), ("not_benefited", ~ben)):
        if sel.any():
            out[name] = {"count": int(sel.sum()), "median": float(np.median(h[sel])), "histogram": _hist(h[sel])}
        else:
            out[name] = None
    out["all"] = {"count": int(len(h)), "median": float(np.median(h)), "histogram": _hist(h)}
    return out


def _fmt(x):
    return "   -  " if x is None else f"{100 * x:6.2f}"


def bin_labels(edges) -> tuple[str, ...]:
    return tuple(f"{lo:.2f}-{hi:.2f}" for lo, hi in zip(edges[:-1], edges[1:]))


BIN_LABELS = bin_labels(BIN_EDGES)


def render_table(rows: dict, populations=None, labels=BIN_LABELS) -> str:
    """Aligned text table: one row per method, columns = homophily bins + overall."""
    header = f"{'method':<16}" + "".join(f"{b:>11}" for b in labels) + f"{'overall':>11}"
    lines = [header, "-" * len(header)]
    for name, row in rows.items():
        lines.append(f"{name:<16}" + "".join(f"{_fmt(a):>11}" for a in row["bins"]) + f"{_fmt(row['overall']):>11}")
    if populations is not None:
        lines.append(f"{'(nodes)':<16}" + "".join(f"{p:>11d}" for p in populations) + f"{sum(populations):>11d}")
    return "\n".join(lines) + "\n"
