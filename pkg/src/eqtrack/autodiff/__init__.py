"""Reverse-mode automatic differentiation over numpy arrays."""

from . import ops
from .ops import DegenerateSVDWarning
from .tensor import NonFiniteError, Tape, Tensor, as_tensor, current_tape

__all__ = ["ops", "DegenerateSVDWarning", "NonFiniteError", "Tape", "Tensor", "as_tensor", "current_tape"]
