"""Selective state-space time-series forecaster (Python bindings)."""

from ._core import (
    CombineMode,
    Error,
    Model,
    ModelConfig,
    checkpoint_stage,
    load_checkpoint,
    mae,
    mse,
    revin_normalize,
    selective_scan,
    synth,
)

__all__ = [
    "CombineMode",
    "Error",
    "Model",
    "ModelConfig",
    "checkpoint_stage",
    "load_checkpoint",
    "mae",
    "mse",
    "revin_normalize",
    "selective_scan",
    "synth",
]
