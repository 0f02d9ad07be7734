"""Deterministic float64 tensors, reverse-mode autodiff, layers and Adam."""

from .layers import (
    ConvNetArch,
    ConvSpec,
    activation_forward,
    conv1d_forward,
    conv_specs,
    dense_forward,
    forward,
    init_params,
)
from .optim import AdamState, adam_step
from .params import ModelParams, load_params, save_params
from .rng import complex_normal, stream
from .tensor import (
    ConfigurationError,
    DimensionError,
    Tensor,
    UsageError,
    concat,
    conv1d,
    conv1d_output_length,
    dense,
    logsumexp,
    stack,
)

__all__ = [
    "AdamState",
    "ConfigurationError",
    "ConvNetArch",
    "ConvSpec",
    "DimensionError",
    "ModelParams",
    "Tensor",
    "UsageError",
    "activation_forward",
    "adam_step",
    "complex_normal",
    "concat",
    "conv1d",
    "conv1d_forward",
    "conv1d_output_length",
    "conv_specs",
    "dense",
    "dense_forward",
    "forward",
    "init_params",
    "load_params",
    "logsumexp",
    "save_params",
    "stack",
    "stream",
]
