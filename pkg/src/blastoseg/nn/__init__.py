"""Numerics core: rank-4 tensor ops, layers with explicit backward passes,
and the finite-difference gradient checker."""

from .ops import (
    conv_output_size,
    same_padding,
    conv2d,
    conv2d_backward,
    transposed_conv2d,
    transposed_conv2d_backward,
    maxpool2d,
    maxpool2d_backward,
)
from .layers import (
    Layer,
    LayerSpec,
    Conv2d,
    TransposedConv2d,
    MaxPool2d,
    BatchNorm2d,
    ReLU,
    Sigmoid,
    Dropout,
    ConcatChannels,
    ResidualAdd,
    Sequential,
)
from .gradcheck import GradCheckReport, finite_difference_check

__all__ = [
    "conv_output_size",
    "same_padding",
    "conv2d",
    "conv2d_backward",
    "transposed_conv2d",
    "transposed_conv2d_backward",
    "maxpool2d",
    "maxpool2d_backward",
    "Layer",
    "LayerSpec",
    "Conv2d",
    "TransposedConv2d",
    "MaxPool2d",
    "BatchNorm2d",
    "ReLU",
    "Sigmoid",
    "Dropout",
    "ConcatChannels",
    "ResidualAdd",
    "Sequential",
    "GradCheckReport",
    "finite_difference_check",
]
