"""Minimal deterministic tensor/network core used by all three models."""

from .checkpoint import load_entries, load_network, save_entries, save_network
from .gradcheck import GradCheckReport, finite_diff_check
from .layers import (
    Conv3d,
    Deconv2d,
    FullyConnected,
    Layer,
    LeakyReLU,
    MeanPool2x2,
    ResidualAdd,
    Sigmoid,
)
from .network import INPUT_SOURCE, LayerSpec, Network
from .optim import Adam, adam_step
from .tensor import Tensor

__all__ = [
    "Adam",
    "adam_step",
    "Conv3d",
    "Deconv2d",
    "FullyConnected",
    "GradCheckReport",
    "INPUT_SOURCE",
    "Layer",
    "LayerSpec",
    "LeakyReLU",
    "MeanPool2x2",
    "Network",
    "ResidualAdd",
    "Sigmoid",
    "Tensor",
    "finite_diff_check",
    "load_entries",
    "load_network",
    "save_entries",
    "save_network",
]
