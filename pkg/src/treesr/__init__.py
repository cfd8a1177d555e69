"""Tree-structured divergent super-resolution with learned per-pixel fusion.

A divergence network emits P = C^L intentionally different high-frequency
predictions for one low-resolution input, trained with a residual-domain
triplet loss; a convergence network fuses them per pixel with learned
softmax weight maps. The package covers the full desk-scale pipeline:
paired-data synthesis, two-stage training, inference, Y-channel evaluation
and diagnostics.
"""

from .loss import LossConfig
from .model import (
    ModelConfig,
    PredictionSet,
    WeightMaps,
    build_convergence_network,
    build_divergence_network,
    convergence_forward,
    count_parameters,
    divergence_forward,
)
from .training import TrainConfig

__all__ = [
    "LossConfig",
    "ModelConfig",
    "PredictionSet",
    "TrainConfig",
    "WeightMaps",
    "build_convergence_network",
    "build_divergence_network",
    "convergence_forward",
    "count_parameters",
    "divergence_forward",
]

__version__ = "0.1.0"
