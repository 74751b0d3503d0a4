"""Text-attributed graph container, structural metrics, neighbourhood sampling
and JSONL/CSV ingestion."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import GraphError, MissingArtifactError
from .utils import make_rng

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
BIN_EDGES = (0.0, 0.25, 0.5, 0.75, 1.0)
# returned for nodes without neighbours, where the ratios are undefined
ISOLATED_SENTINEL = 1.0


@dataclass(frozen=True)
class TextAttributedGraph:
    num_nodes: int
    edges: np.ndarray  # (m, 2), u < v, lexicographically sorted
    neighbor_index: tuple[np.ndarray, ...]
    texts: tuple[str, ...]
    labels: np.ndarray
    features: np.ndarray  # (n, d)
    num_classes: int
    split: np.ndarray  # (n,) of "train" | "val" | "test"
    dropped_self_loops: int = 0
    dropped_duplicates: int = 0
    class_names: tuple[str, ...] = field(default=())

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    @property
    def degrees(self) -> np.ndarray:
        return np.array([len(nb) for nb in self.neighbor_index], dtype=np.int64)

    def nodes_in(self, split: str) -> np.ndarray:
        return np.flatnonzero(self.split == split)

    def without_edges(self) -> TextAttributedGraph:
        return build_graph_arrays(
            self.texts, self.labels, self.features, np.empty((0, 2), dtype=np.int64),
            self.num_classes, self.split, self.class_names,
        )


def _canonical_edges(edges, n: int):
    e = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if e.size and (e.min() < 0 or e.max() >= n):
        bad = e[(e < 0).any(axis=1) | (e >= n).any(axis=1)][0]
        raise GraphError(f"edge {tuple(bad)} references a node id outside [0, {n})")
    loops = e[:, 0] == e[:, 1]
    e = np.sort(e[~loops], axis=1)
    uniq = np.unique(e, axis=0) if e.size else e.reshape(0, 2)
    return uniq, int(loops.sum()), int(len(e) - len(uniq))


def build_graph_arrays(texts, labels, features, edges, num_classes, split=None, class_names=()):
    n = len(texts)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (n,):
        raise GraphError("need exactly one label per node")
    if n and (labels.min() < 0 or labels.max() >= num_classes):
        v = int(np.flatnonzero((labels < 0) | (labels >= num_classes))[0])
        raise GraphError(f"node {v}: label {labels[v]} outside [0, {num_classes})")
    try:
        X = np.asarray(features, dtype=np.float64)
    except ValueError as exc:
        raise GraphError(f"feature vectors differ in dimension: {exc}") from None
    if X.ndim != 2 or X.shape[0] != n:
        raise GraphError("feature vectors differ in dimension or count")
    uniq, loops, dups = _canonical_edges(edges, n)
    adj: list[list[int]] = [[] for _ in range(n)]
    for u, v in uniq:
        adj[u].append(int(v))
        adj[v].append(int(u))
    index = tuple(np.array(sorted(a), dtype=np.int64) for a in adj)
    if split is None:
        split = np.array(["train"] * n)
    split = np.asarray(split)
    if split.shape != (n,) or not np.isin(split, SPLITS).all():
        raise GraphError("split tags must be one of train/val/test per node")
    if class_names and len(class_names) != num_classes:
        raise GraphError("class_names length must equal num_classes")
    names = tuple(class_names) if class_names else tuple(f"class_{k}" for k in range(num_classes))
    return TextAttributedGraph(
        num_nodes=n, edges=uniq, neighbor_index=index, texts=tuple(texts), labels=labels,
        features=X, num_classes=int(num_classes), split=split, dropped_self_loops=loops,
        dropped_duplicates=dups, class_names=names,
    )


def build_graph(nodes, edges, num_classes, class_names=()) -> TextAttributedGraph:
    """Build a graph from node records ``{"text","label","feature"[,"split"]}`` ordered by id.

    Self loops and duplicate (unordered) edges are dropped and counted on the result.
    """
    nodes = list(nodes)
    dims = {len(r["feature"]) for r in nodes}
    if len(dims) > 1:
        raise GraphError(f"feature vectors differ in dimension: {sorted(dims)}")
    split = None
    if nodes and all("split" in r for r in nodes):
        split = [r["split"] for r in nodes]
    g = build_graph_arrays(
        [r["text"] for r in nodes], [r["label"] for r in nodes],
        np.array([r["feature"] for r in nodes], dtype=np.float64).reshape(len(nodes), -1),
        edges, num_classes, split, class_names,
    )
    if g.dropped_self_loops or g.dropped_duplicates:
        log.info("dropped %d self loops and %d duplicate edges", g.dropped_self_loops, g.dropped_duplicates)
    return g


# structural metrics


def local_homophily(g: TextAttributedGraph, v: int, labels=None) -> float:
    """Fraction of v's neighbours sharing its label (``labels`` overrides the true ones)."""
    y = g.labels if labels is None else labels
    nb = g.neighbor_index[v]
    if len(nb) == 0:
        return ISOLATED_SENTINEL
    return float(np.mean(y[nb] == y[v]))


def relative_degree(g: TextAttributedGraph, v: int) -> float:
    nb = g.neighbor_index[v]
    if len(nb) == 0:
        return ISOLATED_SENTINEL
    deg = g.degrees
    return float(np.mean(np.sqrt((deg[v] + 1.0) / (deg[nb] + 1.0))))


def all_local_homophily(g: TextAttributedGraph, labels=None) -> np.ndarray:
    """Vectorised local homophily over all nodes via the edge list."""
    y = g.labels if labels is None else np.asarray(labels)
    deg = g.degrees
    same = np.zeros(g.num_nodes)
    if len(g.edges):
        u, v = g.edges[:, 0], g.edges[:, 1]
        match = (y[u] == y[v]).astype(np.float64)
        np.add.at(same, u, match)
        np.add.at(same, v, match)
    out = np.full(g.num_nodes, ISOLATED_SENTINEL)
    has = deg > 0
    out[has] = same[has] / deg[has]
    return out


def all_relative_degree(g: TextAttributedGraph) -> np.ndarray:
    deg = g.degrees.astype(np.float64)
    acc = np.zeros(g.num_nodes)
    if len(g.edges):
        u, v = g.edges[:, 0], g.edges[:, 1]
        np.add.at(acc, u, np.sqrt((deg[u] + 1) / (deg[v] + 1)))
        np.add.at(acc, v, np.sqrt((deg[v] + 1) / (deg[u] + 1)))
    out = np.full(g.num_nodes, ISOLATED_SENTINEL)
    has = deg > 0
    out[has] = acc[has] / deg[has]
    return out


def structural_metrics(g: TextAttributedGraph) -> dict[str, np.ndarray]:
    return {
        "degree": g.degrees,
        "local_homophily": all_local_homophily(g),
        "relative_degree": all_relative_degree(g),
    }


def sample_khop(g: TextAttributedGraph, v: int, k: int = 1, per_node_cap: int = 5, seed: int = 0):
    """Capped uniform neighbourhood sample as ``[(node, hop), ...]``.

    Hop 1 draws up to ``per_node_cap`` neighbours of v. Hop 2 draws up to the cap
    from each sampled hop-1 node, skipping v and anything already selected.
    """
    if k not in (1, 2):
        raise ValueError("k must be 1 or 2")
    if per_node_cap < 1:
        raise ValueError("per_node_cap must be >= 1")
    rng = make_rng(seed, "khop", v)

    def draw(pool):
        if len(pool) <= per_node_cap:
            return sorted(int(u) for u in pool)
        return sorted(int(u) for u in rng.choice(pool, size=per_node_cap, replace=False))

    hop1 = draw(g.neighbor_index[v])
    out = [(u, 1) for u in hop1]
    if k == 2:
        seen = {v, *hop1}
        for u in hop1:
            pool = np.array([w for w in g.neighbor_index[u] if w not in seen], dtype=np.int64)
            picked = draw(pool)
            seen.update(picked)
            out.extend((w, 2) for w in picked)
    return out


def stratify_bins(values, edges=BIN_EDGES) -> np.ndarray:
    """Bin index per value; bins are half-open except the last, which is closed."""
    vals = np.asarray(values, dtype=np.float64)
    edges = np.asarray(edges, dtype=np.float64)
    if vals.size and (np.isnan(vals).any() or vals.min() < edges[0] or vals.max() > edges[-1]):
        raise ValueError(f"values must lie in [{edges[0]}, {edges[-1]}]")
    idx = np.searchsorted(edges, vals, side="right") - 1
    return np.minimum(idx, len(edges) - 2)


def random_split(n: int, seed: int, fractions=(0.5, 0.25, 0.25)) -> np.ndarray:
    perm = make_rng(seed, "split").permutation(n)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    split = np.empty(n, dtype=object)
    split[perm[:n_train]] = "train"
    split[perm[n_train:n_train + n_val]] = "val"
    split[perm[n_train + n_val:]] = "test"
    return split.astype(str)


# file formats


def _parse_node(line: str, lineno: int, path) -> dict:
    try:
        rec = json.loads(line)
        node = {
            "id": int(rec["id"]),
            "text": str(rec["text"]),
            "label": int(rec["label"]),
        }
        if "feature" in rec and rec["feature"] is not None:
            node["feature"] = [float(x) for x in rec["feature"]]
        if "split" in rec:
            if rec["split"] not in SPLITS:
                raise ValueError(f"bad split {rec['split']!r}")
            node["split"] = rec["split"]
    except (ValueError, KeyError, TypeError) as exc:
        raise GraphError(f"{path}:{lineno}: malformed node record ({exc})") from None
    return node


def ingest_dataset(nodes_path, edges_path, num_classes: int | None = None, seed: int = 0,
                   class_names=(), feature_fn=None) -> TextAttributedGraph:
    """Load the JSONL nodes file and the ``src,dst`` CSV edges file.

    Missing splits are drawn 50/25/25 from ``seed``. ``feature_fn(texts)`` fills
    features when records omit them.
    """
    nodes_path, edges_path = Path(nodes_path), Path(edges_path)
    for p in (nodes_path, edges_path):
        if not p.exists():
            raise MissingArtifactError(f"missing dataset file: {p}")
    records = []
    with nodes_path.open() as fh:
        for lineno, line in enumerate(fh, 1):
            if line.strip():
                records.append((lineno, _parse_node(line, lineno, nodes_path)))
    ids = sorted(r["id"] for _, r in records)
    if ids != list(range(len(records))):
        raise GraphError(f"{nodes_path}: node ids must be exactly 0..{len(records) - 1}")
    records.sort(key=lambda t: t[1]["id"])
    if num_classes is None:
        num_classes = max((r["label"] for _, r in records), default=-1) + 1
    for lineno, r in records:
        if not 0 <= r["label"] < num_classes:
            raise GraphError(f"{nodes_path}:{lineno}: label {r['label']} outside [0, {num_classes})")
    nodes = [r for _, r in records]
    missing = [r["id"] for r in nodes if "feature" not in r]
    if missing:
        if feature_fn is None:
            raise GraphError(f"{nodes_path}: node {missing[0]} has no feature vector and no feature provider is configured")
        feats = np.asarray(feature_fn([r["text"] for r in nodes]), dtype=np.float64)
        for r, f in zip(nodes, feats):
            r.setdefault("feature", f.tolist())

    edges = []
    with edges_path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["src", "dst"]:
            raise GraphError(f"{edges_path}:1: expected header 'src,dst'")
        for lineno, row in enumerate(reader, 2):
            if not row:
                continue
            try:
                src, dst = (int(x) for x in row)
            except ValueError:
                raise GraphError(f"{edges_path}:{lineno}: malformed edge row {row!r}") from None
            edges.append((src, dst))

    if not all("split" in r for r in nodes):
        split = random_split(len(nodes), seed)
        for r, s in zip(nodes, split):
            r["split"] = str(s)
    return build_graph(nodes, np.array(edges, dtype=np.int64).reshape(-1, 2), num_classes, class_names)


def write_dataset(g: TextAttributedGraph, nodes_path, edges_path) -> None:
    with Path(nodes_path).open("w") as fh:
        for v in range(g.num_nodes):
            rec = {
                "id": v,
                "text": g.texts[v],
                "label": int(g.labels[v]),
                "feature": [float(x) for x in g.features[v]],
                "split": str(g.split[v]),
            }
            fh.write(json.dumps(rec) + "\n")
    with Path(edges_path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["src", "dst"])
        for u, v in g.edges:
            w.writerow([int(u), int(v)])
