"""Contrastive video-text training with a subtractive angular margin and
meta-learned sample weights, plus density-peak key-frame selection."""

from .encoders import Batch, EncoderParams
from .metaopt import TrainConfig, train
from .objectives import MarginSchedule, combined_loss
from .weighting import WeightingScheme, WeightNetParams

__all__ = [
    "Batch",
    "EncoderParams",
    "MarginSchedule",
    "TrainConfig",
    "WeightNetParams",
    "WeightingScheme",
    "combined_loss",
    "train",
]
