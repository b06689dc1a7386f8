from .core import DimensionError, NumericError, Tape, Tensor, backward
from .gradcheck import GradCheckReport, grad_check, grad_check_many
from . import ops

__all__ = [
    "DimensionError",
    "GradCheckReport",
    "NumericError",
    "Tape",
    "Tensor",
    "backward",
    "grad_check",
    "grad_check_many",
    "ops",
]
