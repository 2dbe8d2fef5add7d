"""Weighted causal attention with power-law and Butterworth decay masks for
patch-based time-series forecasting."""

__version__ = "0.1.0"

from .masks import MaskSpec, ScoreMask, causal_mask, compose, full_mask, render_decay_mask
from .model import ModelConfig, Powerformer, load_checkpoint, save_checkpoint
from .training import RunRecord, TrainConfig, evaluate_protocol, train, train_learnable_alpha

__all__ = [
    "MaskSpec",
    "ScoreMask",
    "causal_mask",
    "compose",
    "full_mask",
    "render_decay_mask",
    "ModelConfig",
    "Powerformer",
    "load_checkpoint",
    "save_checkpoint",
    "RunRecord",
    "TrainConfig",
    "evaluate_protocol",
    "train",
    "train_learnable_alpha",
]
