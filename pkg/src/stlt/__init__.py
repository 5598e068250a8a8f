"""Sequence mixing with learnable short-time Laplace transform coefficients."""

from .core import LaplaceNodeBank, Mode, WindowKind, WindowSpec, init_bank, stlt_direct, stlt_streaming
from .mixer import ModelConfig, ModelParams, forward_lm, init_lm
from .train import TrainConfig, train_loop

__all__ = [
    "LaplaceNodeBank",
    "Mode",
    "WindowKind",
    "WindowSpec",
    "init_bank",
    "stlt_direct",
    "stlt_streaming",
    "ModelConfig",
    "ModelParams",
    "forward_lm",
    "init_lm",
    "TrainConfig",
    "train_loop",
]
