"""Concept-level cross-attentive fusion classifier with a synthetic lesion benchmark.

Local concept tokens query one global image token; per-concept class scores
are pooled by per-class top-k averaging and trained with a bag-level loss.
Everything is plain numpy with hand-written gradients.
"""

from .config import ConfigError, ModelConfig, TrainConfig
from .metrics import MetricsReport, compute_metrics
from .training import TrainedModel, TrainResult, train

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "MetricsReport", "ModelConfig", "TrainConfig", "TrainResult", "TrainedModel",
    "compute_metrics", "train",
]
