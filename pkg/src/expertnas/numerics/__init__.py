from . import ops
from .gradcheck import grad_error, numeric_grad
from .optim import Adam, OptimizerState, adam_step
from .tensor import (
    ContractError,
    NonFiniteError,
    ShapeError,
    Tape,
    Tensor,
    backward,
    no_grad,
)

__all__ = [
    "Adam",
    "ContractError",
    "NonFiniteError",
    "OptimizerState",
    "ShapeError",
    "Tape",
    "Tensor",
    "adam_step",
    "backward",
    "grad_error",
    "no_grad",
    "numeric_grad",
    "ops",
]
