from .adam import AdamState, adam_step
from .gumbel import gumbel_from_uniform, gumbel_sample
from .tape import Tape, Var, grad_check, value_and_grad

__all__ = [
    "AdamState",
    "Tape",
    "Var",
    "adam_step",
    "grad_check",
    "gumbel_from_uniform",
    "gumbel_sample",
    "value_and_grad",
]
