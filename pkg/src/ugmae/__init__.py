"""Graph masked autoencoder pretraining with adaptive feature masks, ranking-based
structure reconstruction, bootstrapped similarity and momentum-decoder consistency."""

from .backbone import Arch, Backbone
from .graph import Graph, MaskPlan, apply_feature_mask, apply_structure_mask, validate_graph
from .masking import AdaptiveSampler, sample_feature_mask, sample_structure_mask, sampling_loss, score_nodes
from .momentum import EmaShadow, ema_update, init_shadow, momentum_forward
from .objectives import LossConfig, LossReport, LossWeights
from .trainer import TrainConfig, pretrain, train_step

__version__ = "0.1.0"

__all__ = [
    "AdaptiveSampler", "Arch", "Backbone", "EmaShadow", "Graph", "LossConfig", "LossReport", "LossWeights",
    "MaskPlan", "TrainConfig", "apply_feature_mask", "apply_structure_mask", "ema_update", "init_shadow",
    "momentum_forward", "pretrain", "sample_feature_mask", "sample_structure_mask", "sampling_loss",
    "score_nodes", "train_step", "validate_graph",
]
