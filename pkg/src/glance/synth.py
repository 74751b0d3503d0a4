"""Synthetic text-attributed graphs with a controllable local-homophily mixture.

Every node gets a target homophily from the mixture and a degree. Its edge stubs
are split into same-class and cross-class stubs in that proportion (stochastic
rounding keeps the split unbiased), and the two stub pools are paired
separately, so each node's realised homophily tracks its own target rather than
a graph-wide average.
"""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .exceptions import ConfigError
from .graph import TextAttributedGraph, all_local_homophily, build_graph_arrays, random_split
from .utils import make_rng

log = logging.getLogger(__name__)

_CONSONANTS = "bdfgklmnprstvz"
_VOWELS = "aeiou"


class InfeasibleMixtureError(ConfigError):
    pass


@dataclass
class SynthConfig:
    num_nodes: int = 2000
    num_classes: int = 4
    mean_degree: float = 8.0
    homophily_mixture: list = field(default_factory=lambda: [[0.1, 0.3], [0.9, 0.7]])
    feature_noise: float = 0.3
    feature_jitter: float = 0.05
    vocab: list | None = None  # per-class token lists; generated from the seed when absent
    vocab_size: int = 12
    noise_vocab_size: int = 40
    class_tokens_per_text: int = 6
    noise_tokens_per_text: int = 6
    text_noise: float = 0.1
    group_text_noise: list | None = None  # per-mixture-group override of text_noise
    seed: int = 0

    def __post_init__(self):
        if self.num_nodes < 1 or self.num_classes < 1:
            raise ConfigError("num_nodes and num_classes must be positive")
        if self.mean_degree < 1:
            raise ConfigError("mean_degree must be >= 1")
        mix = [tuple(map(float, m)) for m in self.homophily_mixture]
        if not mix:
            raise ConfigError("homophily_mixture is empty")
        if any(not 0.0 <= h <= 1.0 or f < 0 for h, f in mix):
            raise ConfigError("mixture targets must lie in [0, 1] and fractions be >= 0")
        if abs(sum(f for _, f in mix) - 1.0) > 1e-9:
            raise ConfigError("mixture fractions must sum to 1")
        self.homophily_mixture = [list(m) for m in mix]
        for name in ("feature_noise", "text_noise"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")
        if self.group_text_noise is not None and len(self.group_text_noise) != len(mix):
            raise ConfigError("group_text_noise needs one entry per mixture group")
        if self.vocab is not None and len(self.vocab) != self.num_classes:
            raise ConfigError("vocab needs one token list per class")


def _word(rng, syllables: int) -> str:
    return "".join(rng.choice(list(_CONSONANTS)) + rng.choice(list(_VOWELS)) for _ in range(syllables))


def class_vocab(cfg: SynthConfig) -> tuple[list[list[str]], list[str]]:
    """Per-class token pools and the shared noise pool (deterministic in the seed)."""
    rng = make_rng(cfg.seed, "vocab")
    used: set[str] = set()

    def fresh(k):
        out = []
        while len(out) < k:
            w = _word(rng, 3)
            if w not in used:
                used.add(w)
                out.append(w)
        return out

    if cfg.vocab is not None:
        pools = [list(p) for p in cfg.vocab]
        used.update(w for p in pools for w in p)
    else:
        pools = [fresh(cfg.vocab_size) for _ in range(cfg.num_classes)]
    return pools, fresh(cfg.noise_vocab_size)


def _edge_key(a, b):
    return (a, b) if a < b else (b, a)


def _pair_stubs(stubs, ok, rng, rounds=20):
    """Randomly pair stubs, then repair invalid or duplicate pairs by 2-swaps."""
    stubs = rng.permutation(np.asarray(stubs, dtype=np.int64))
    pairs = [[int(stubs[i]), int(stubs[i + 1])] for i in range(0, len(stubs) - 1, 2)]
    counts = Counter(_edge_key(a, b) for a, b in pairs)

    def bad(i):
        a, b = pairs[i]
        return not ok(a, b) or counts[_edge_key(a, b)] > 1

    for _ in range(rounds):
        todo = [i for i in range(len(pairs)) if bad(i)]
        if not todo:
            break
        for i in todo:
            if not bad(i):
                continue
            for _ in range(10):
                j = int(rng.integers(len(pairs)))
                if j == i:
                    continue
                (a, b), (c, d) = pairs[i], pairs[j]
                counts[_edge_key(a, b)] -= 1
                counts[_edge_key(c, d)] -= 1
                for p, q in (((a, c), (b, d)), ((a, d), (b, c))):
                    if ok(*p) and ok(*q) and counts[_edge_key(*p)] == 0 and counts[_edge_key(*q)] == 0 \
                            and _edge_key(*p) != _edge_key(*q):
                        pairs[i], pairs[j] = list(p), list(q)
                        break
                else:
                    counts[_edge_key(a, b)] += 1
                    counts[_edge_key(c, d)] += 1
                    continue
                counts[_edge_key(*pairs[i])] += 1
                counts[_edge_key(*pairs[j])] += 1
                break
    keep, dropped, seen = [], 0, set()
    for a, b in pairs:
        key = _edge_key(a, b)
        if not ok(a, b) or key in seen:
            dropped += 1
            continue
        seen.add(key)
        keep.append(key)
    return keep, dropped


def synth_generate(cfg: SynthConfig, return_groups: bool = False):
    """Generate a graph; with ``return_groups`` also return each node's mixture group."""
    rng = make_rng(cfg.seed, "synth")
    n, C = cfg.num_nodes, cfg.num_classes
    mix = cfg.homophily_mixture

    labels = rng.permutation(np.arange(n) % C)
    sizes = [int(round(f * n)) for _, f in mix]
    sizes[-1] = n - sum(sizes[:-1])
    groups = rng.permutation(np.repeat(np.arange(len(mix)), sizes))
    target = np.array([mix[gidx][0] for gidx in groups])

    if C == 1 and (target < 1.0).any():
        raise InfeasibleMixtureError("cross-class edges requested but the graph has a single class")

    deg = 1 + rng.poisson(cfg.mean_degree - 1.0, size=n)
    raw = target * deg
    same = np.floor(raw).astype(np.int64)
    same += rng.random(n) < (raw - same)
    diff = deg - same

    # Cross-class pool: no class may own more than half the stubs, and the total
    # must be even. Extra stubs go to the lowest-target nodes outside the heavy class.
    per_class = np.bincount(labels, weights=diff, minlength=C).astype(np.int64)
    total = int(per_class.sum())
    if total:
        heavy = int(per_class.argmax())
        excess = int(per_class[heavy] - (total - per_class[heavy]))
        others = np.flatnonzero(labels != heavy)
        order = others[np.lexsort((rng.random(len(others)), target[others]))]
        for i in range(max(excess, 0)):
            diff[order[i % len(order)]] += 1
        if diff.sum() % 2:
            diff[order[0]] += 1
    for c in range(C):
        members = np.flatnonzero(labels == c)
        if same[members].sum() % 2:
            same[members[rng.integers(len(members))]] += 1

    edges = []
    dropped = 0
    for c in range(C):
        members = np.flatnonzero(labels == c)
        stubs = np.repeat(members, same[members])
        kept, d = _pair_stubs(stubs, lambda a, b: a != b, rng)
        edges.extend(kept)
        dropped += d
    stubs = np.repeat(np.arange(n), diff)
    kept, d = _pair_stubs(stubs, lambda a, b: labels[a] != labels[b], rng)
    edges.extend(kept)
    dropped += d
    if dropped:
        log.info("synth: dropped %d unrepairable stub pairs", dropped)

    pools, noise_pool = class_vocab(cfg)
    texts = []
    for v in range(n):
        noise_p = cfg.text_noise if cfg.group_text_noise is None else cfg.group_text_noise[groups[v]]
        words = []
        for _ in range(cfg.class_tokens_per_text):
            c = labels[v]
            if C > 1 and rng.random() < noise_p:
                c = (labels[v] + rng.integers(1, C)) % C
            words.append(pools[c][rng.integers(len(pools[c]))])
        words += [noise_pool[rng.integers(len(noise_pool))] for _ in range(cfg.noise_tokens_per_text)]
        texts.append(" ".join(rng.permutation(words)))

    feat_class = labels.copy()
    flip = rng.random(n) < cfg.feature_noise
    feat_class[flip] = rng.integers(0, C, size=int(flip.sum()))
    X = np.eye(C)[feat_class] + cfg.feature_jitter * rng.standard_normal((n, C))

    split = random_split(n, cfg.seed)
    g = build_graph_arrays(texts, labels, X, np.array(edges, dtype=np.int64).reshape(-1, 2), C, split)

    realized = realized_mixture(g, groups, len(mix))
    for gi, (h, _) in enumerate(mix):
        gap = abs(realized[gi] - h) if realized[gi] is not None else 0.0
        if gap > 0.05:
            msg = f"mixture group {gi}: realised mean homophily {realized[gi]:.3f} vs target {h:.3f}"
            if n >= 1000:
                raise InfeasibleMixtureError(msg)
            log.warning(msg)
    return (g, groups) if return_groups else g


def realized_mixture(g: TextAttributedGraph, groups, n_groups: int) -> list[float | None]:
    h = all_local_homophily(g)
    has = g.degrees > 0
    out = []
    for gi in range(n_groups):
        sel = (groups == gi) & has
        out.append(float(h[sel].mean()) if sel.any() else None)
    return out
