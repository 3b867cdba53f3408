"""Minimal dense-tensor engine with reverse-mode differentiation."""
from . import functional, kernels
from .functional import (
    activation,
    bilinear_upsample,
    concat,
    conv2d,
    dense,
    group_norm,
    pool2d,
)
from .module import Module
from .optim import SGD, Adam, adam_step
from .tensor import Parameter, Tape, Tensor, backward, default_dtype, finite_checks, precision

__all__ = [
    "Adam", "Module", "Parameter", "SGD", "Tape", "Tensor", "activation", "adam_step", "backward",
    "bilinear_upsample", "concat", "conv2d", "default_dtype", "dense",
    "finite_checks", "functional", "group_norm", "kernels", "pool2d", "precision",
]
