from __future__ import annotations

import numpy as np
import pytest

from glance.gnn import GCNClassifier
from glance.graph import build_graph_arrays
from glance.homophily import HomophilyEstimator
from glance.llm import MockProvider
from glance.synth import SynthConfig, class_vocab, synth_generate


def random_graph(n=30, p=0.15, num_classes=3, d=4, seed=0, split=None):
    rng = np.random.default_rng(seed)
    iu = np.triu_indices(n, 1)
    mask = rng.random(len(iu[0])) < p
    edges = np.stack([iu[0][mask], iu[1][mask]], axis=1)
    labels = rng.integers(0, num_classes, n)
    feats = rng.standard_normal((n, d))
    texts = [f"node {i}" for i in range(n)]
    if split is None:
        split = np.array(["train", "val", "test"])[np.arange(n) % 3]
    return build_graph_arrays(texts, labels, feats, edges, num_classes, split)


@pytest.fixture
def make_graph():
    return random_graph


@pytest.fixture(scope="session")
def small_world():
    """A 300-node synthetic graph with trained experts and a mock provider factory."""
    cfg = SynthConfig(num_nodes=300, num_classes=3, homophily_mixture=[[0.1, 0.3], [0.9, 0.7]], seed=3)
    g = synth_generate(cfg)
    vocab, _ = class_vocab(cfg)
    gnn = GCNClassifier(max_epochs=200, seed=3).fit(g)
    q = HomophilyEstimator(max_epochs=200, seed=3).fit(g)
    return {"graph": g, "vocab": vocab, "gnn": gnn, "q": q,
            "provider": lambda: MockProvider(dim=16, seed=3, vocab=vocab)}
