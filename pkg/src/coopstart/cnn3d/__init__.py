"""Micro-scale 3D residual convolutional network in numpy."""

from .layers import ConvLayer, conv3d, relu
from .network import (
    NetworkSpec,
    NetworkWeights,
    ResidualWeights,
    backward,
    forward,
    init_weights,
    micro_preset,
    full_preset,
    reduced_preset,
    residual_block,
)

__all__ = [
    "ConvLayer",
    "NetworkSpec",
    "NetworkWeights",
    "ResidualWeights",
    "backward",
    "conv3d",
    "forward",
    "init_weights",
    "micro_preset",
    "full_preset",
    "reduced_preset",
    "relu",
    "residual_block",
]
