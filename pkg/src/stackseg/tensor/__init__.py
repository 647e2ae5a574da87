"""Minimal reverse-mode tensor engine on numpy buffers."""
from .autodiff import (
    Tensor,
    Node,
    backward,
    no_grad,
    grad_enabled,
    zeros,
    full,
    uniform,
    gaussian,
    leaf,
    constant,
    zero_grads,
)
from . import ops

__all__ = [
    "Tensor",
    "Node",
    "backward",
    "no_grad",
    "grad_enabled",
    "zeros",
    "full",
    "uniform",
    "gaussian",
    "leaf",
    "constant",
    "zero_grads",
    "ops",
]
