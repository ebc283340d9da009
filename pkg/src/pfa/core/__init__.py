"""Differentiable array engine: tensors, ops, SGD, checkpoints, gradcheck."""

from . import functional
from .checkpoint import load_checkpoint, save_checkpoint
from .functional import BatchNormState
from .gradcheck import check_gradients, finite_difference, relative_error
from .module import Module
from .optim import SGD
from .tensor import Parameter, Tensor, backward, no_grad

__all__ = [
    "functional",
    "Tensor",
    "Parameter",
    "backward",
    "no_grad",
    "Module",
    "SGD",
    "BatchNormState",
    "save_checkpoint",
    "load_checkpoint",
    "check_gradients",
    "finite_difference",
    "relative_error",
]
