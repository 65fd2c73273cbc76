"""Bootstrapped spatiotemporal representation learning for correlated time series."""

from .data import AdjacencyGraph, CtsDataset, NormStats, SplitSpec
from .model import DESK_ENCODER, EncoderConfig, STBRModel, load_checkpoint, save_checkpoint
from .trainer import TrainConfig, train_loop

__version__ = "0.1.0"

__all__ = [
    "AdjacencyGraph", "CtsDataset", "DESK_ENCODER", "EncoderConfig", "NormStats", "STBRModel", "SplitSpec",
    "TrainConfig", "load_checkpoint", "save_checkpoint", "train_loop",
]
