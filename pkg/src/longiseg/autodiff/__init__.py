"""Minimal reverse-mode autodiff over numpy arrays."""
from . import functional
from .tensor import NumericalError, Tensor, as_tensor, backward, is_grad_enabled, no_grad, set_debug

__all__ = [
    "NumericalError",
    "Tensor",
    "as_tensor",
    "backward",
    "functional",
    "is_grad_enabled",
    "no_grad",
    "set_debug",
]
