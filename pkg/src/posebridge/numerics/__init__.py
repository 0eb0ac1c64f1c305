"""Float64 tensors, a reverse-mode tape and finite-difference checking."""

from . import functional, ops
from .functional import (
    cross_entropy,
    gelu,
    layer_norm,
    l2_normalize,
    linear,
    log_softmax,
    mlp,
    scaled_dot_attention,
    softmax,
)
from .gradcheck import GradCheckReport, analytic_gradients, grad_check
from .tape import Primitive, Tape, Tensor, as_tensor, current_tape, value_of

__all__ = [
    "GradCheckReport",
    "Primitive",
    "Tape",
    "Tensor",
    "analytic_gradients",
    "as_tensor",
    "cross_entropy",
    "current_tape",
    "functional",
    "gelu",
    "grad_check",
    "layer_norm",
    "l2_normalize",
    "linear",
    "log_softmax",
    "mlp",
    "ops",
    "scaled_dot_attention",
    "softmax",
    "value_of",
]
