"""Gradient-inversion attacks on shared gradients and the dropout defense."""

from ._kernels import BACKEND
from .autodiff import Tape, Tensor, backward, grad_check
from .nn import build_lenet, cross_entropy, forward, param_gradients

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "Tape",
    "Tensor",
    "backward",
    "build_lenet",
    "cross_entropy",
    "forward",
    "grad_check",
    "param_gradients",
]
