"""Minimal dense tensors with tape-based reverse-mode differentiation."""
from .core import ShapeError, Tape, TapeError, Tensor, active_tape, as_tensor, backward
from .gradcheck import grad_check
from .params import ParamStore

__all__ = [
    "ParamStore",
    "ShapeError",
    "Tape",
    "TapeError",
    "Tensor",
    "active_tape",
    "as_tensor",
    "backward",
    "grad_check",
]
