from . import ops, rft
from .gradcheck import GradCheckReport, NonDeterministicError, grad_check, relative_error
from .tensor import Parameter, ShapeError, Tape, Tensor, as_tensor, current_tape, emit, flat_index, no_tape

__all__ = [
    "GradCheckReport",
    "NonDeterministicError",
    "Parameter",
    "ShapeError",
    "Tape",
    "Tensor",
    "as_tensor",
    "current_tape",
    "emit",
    "flat_index",
    "grad_check",
    "no_tape",
    "ops",
    "relative_error",
    "rft",
]
