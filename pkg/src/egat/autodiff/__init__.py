"""Reverse-mode autodiff on numpy arrays with double-backprop support."""
from .engine import (
    AutodiffError,
    Graph,
    ShapeError,
    Tensor,
    UnsupportedOpError,
    as_tensor,
    backward_grad,
    forward_eval,
    grad,
    is_grad_enabled,
    no_grad,
    second_order_grad,
    set_grad_enabled,
)
from . import ops

__all__ = [
    "AutodiffError",
    "Graph",
    "ShapeError",
    "Tensor",
    "UnsupportedOpError",
    "as_tensor",
    "backward_grad",
    "forward_eval",
    "grad",
    "is_grad_enabled",
    "no_grad",
    "ops",
    "second_order_grad",
    "set_grad_enabled",
]
