"""Attention-pooled CNN for multi-label facial action unit detection."""

from .estimator import AUDetector
from .model import ModelConfig, ModelParams, forward, init_params
from .objective import AU_NAMES, MetricReport, compute_class_weights, macro_f1, weighted_bce
from .trainer import TrainConfig, evaluate, load_checkpoint, save_checkpoint, train

__all__ = [
    "AUDetector", "ModelConfig", "ModelParams", "forward", "init_params",
    "AU_NAMES", "MetricReport", "compute_class_weights", "macro_f1", "weighted_bce",
    "TrainConfig", "evaluate", "load_checkpoint", "save_checkpoint", "train",
]
__version__ = "0.1.0"
