"""Dense tensors, reverse-mode differentiation, and parameter containers."""

from scanloop.compute.gradcheck import finite_diff_check
from scanloop.compute.optim import Adam, step_decay
from scanloop.compute.params import ParameterStore
from scanloop.compute.tensor import Tape, Tensor, backward, fresh_tape, no_grad

__all__ = [
    "Adam",
    "ParameterStore",
    "Tape",
    "Tensor",
    "backward",
    "finite_diff_check",
    "fresh_tape",
    "no_grad",
    "step_decay",
]
