"""Minimal reverse-mode differentiation engine and CNN layers."""

from .backbone import Backbone, BackboneSpec, build_backbone
from .layers import activation_apply, conv2d_forward, dense_forward, maxpool2d_forward
from .optim import Adam
from .tensor import Tensor, as_tensor, no_grad, stack

__all__ = [
    "Adam",
    "Backbone",
    "BackboneSpec",
    "Tensor",
    "activation_apply",
    "as_tensor",
    "build_backbone",
    "conv2d_forward",
    "dense_forward",
    "maxpool2d_forward",
    "no_grad",
    "stack",
]
