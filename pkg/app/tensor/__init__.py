"""Minimal numpy tensor engine: layers, losses, optimizer and weight files."""

from .layers import (
    LAYER_KINDS,
    BackwardError,
    LayerSpec,
    LayerSpecError,
    ShapeError,
    batchnorm,
    conv2d,
    init_params,
    layer_backward,
    layer_forward,
)
from .losses import cross_entropy
from .network import Layer, Network, Sequential
from .optim import SGD, sgd_step
from .params import ParamSet
from .serialization import TensorFormatError, load_tensors, save_tensors

__all__ = [
    "LAYER_KINDS",
    "BackwardError",
    "Layer",
    "LayerSpec",
    "LayerSpecError",
    "Network",
    "ParamSet",
    "SGD",
    "Sequential",
    "ShapeError",
    "TensorFormatError",
    "batchnorm",
    "conv2d",
    "cross_entropy",
    "init_params",
    "layer_backward",
    "layer_forward",
    "load_tensors",
    "save_tensors",
    "sgd_step",
]
