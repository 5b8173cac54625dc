"""Embed weighted DAGs as events in a learned spacetime.

Spatial coordinates carry a trainable quasi-metric that approximates edge
weights; time coordinates carry a trainable product order that encodes edge
direction.
"""
from .baselines import FixedGeometryModel, SnowflakeModel
from .graph import Poset, UndirectedView, WeightedDigraph, generate_random_dag, generate_tree
from .nst import NeuralSpacetime, load_checkpoint, save_checkpoint
from .training import EmbeddingReport, TrainConfig, evaluate, train

__all__ = [
    "EmbeddingReport",
    "FixedGeometryModel",
    "NeuralSpacetime",
    "Poset",
    "SnowflakeModel",
    "TrainConfig",
    "UndirectedView",
    "WeightedDigraph",
    "evaluate",
    "generate_random_dag",
    "generate_tree",
    "load_checkpoint",
    "save_checkpoint",
    "train",
]
