"""Collaborative adversarial learning for link prediction on bipartite graphs
that share one entity type."""

from .data import MultiDomainDataset, RelationMatrix, SynthConfig, gen_synthetic, leave_one_out_split
from .evaluation import MetricsReport, evaluate_model
from .model import CalParams, build_model, predict
from .training import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "CalParams",
    "MetricsReport",
    "MultiDomainDataset",
    "RelationMatrix",
    "SynthConfig",
    "TrainConfig",
    "build_model",
    "evaluate_model",
    "gen_synthetic",
    "leave_one_out_split",
    "predict",
    "train",
]
