"""Self-interpretable link prediction for continuous-time dynamic graphs.

The model predicts, for a query pair at a timestamp, the probability of
a link plus a causal explanation subgraph (temporal edges and structural
nodes with importance scores), trained with interventional prediction
heads that resist shortcut features.
"""

from . import autodiff, confounders, explain, extractors, graph, heads, synth
from .checkpoint import load_checkpoint, save_checkpoint
from .graph import (EventStore, Event, default_node_features, load_events,
                    split_chronological)
from .model import ModelConfig, SIGModel
from .synth import ood_inject, planted_pattern_generate
from .training import TrainConfig, evaluate_ap_auc, train

__all__ = [
    "autodiff", "confounders", "explain", "extractors", "graph", "heads",
    "synth", "EventStore", "Event", "default_node_features", "load_events",
    "split_chronological", "ModelConfig", "SIGModel", "TrainConfig",
    "evaluate_ap_auc", "train", "ood_inject", "planted_pattern_generate",
    "load_checkpoint", "save_checkpoint",
]
