"""Per-node routing between a frozen GCN and a frozen text-embedding expert."""

from .gnn import GCNClassifier
from .graph import TextAttributedGraph, build_graph, build_graph_arrays, ingest_dataset
from .homophily import HomophilyEstimator
from .llm import MockProvider, make_provider
from .refiner import Refiner
from .synth import SynthConfig, synth_generate
from .trainer import GlanceClassifier, load_bundle, save_bundle

__all__ = [
    "GCNClassifier", "GlanceClassifier", "HomophilyEstimator", "MockProvider", "Refiner", "SynthConfig",
    "TextAttributedGraph", "build_graph", "build_graph_arrays", "ingest_dataset", "load_bundle",
    "make_provider", "save_bundle", "synth_generate",
]
