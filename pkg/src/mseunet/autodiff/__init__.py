from . import ops
from .gradcheck import GradCheckReport, grad_check
from .tensor import (
    NonFiniteError,
    ShapeError,
    Tape,
    Tensor,
    as_tensor,
    backward,
    default_dtype,
    get_default_dtype,
    grad_enabled,
    grads_for,
    no_grad,
    set_default_dtype,
)

__all__ = [
    "GradCheckReport", "NonFiniteError", "ShapeError", "Tape", "Tensor", "as_tensor",
    "backward", "default_dtype", "get_default_dtype", "grad_check", "grad_enabled",
    "grads_for", "no_grad", "ops", "set_default_dtype",
]
