"""Cold-start-aware multi-task ranking: model, losses, synthetic data and evaluation."""

from .evalkit import EvalConfig, MetricsReport, evaluate, hits_at_k, pca_effective_rank, pr_auc
from .model import ModelConfig, count_params, init_params, predict
from .objectives import TrainConfig, combined_loss
from .synthdata import GenSpec, generate, read_dataset, write_dataset
from .trainer import train

__version__ = "0.1.0"

__all__ = [
    "EvalConfig",
    "GenSpec",
    "MetricsReport",
    "ModelConfig",
    "TrainConfig",
    "combined_loss",
    "count_params",
    "evaluate",
    "generate",
    "hits_at_k",
    "init_params",
    "pca_effective_rank",
    "pr_auc",
    "predict",
    "read_dataset",
    "train",
    "write_dataset",
]
