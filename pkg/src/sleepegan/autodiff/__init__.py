"""Reverse-mode autodiff engine: tensors, layers, losses, Adam, checkpoints."""

from . import functional, kernels
from .checkpoint import Checkpoint
from .nn import LSTM, Conv1d, Linear, Module
from .optim import Adam, AdamState, adam_step, clip_grad_norm
from .tensor import ShapeError, Tensor, concat, no_grad, stack, tensor

__all__ = [
    "Adam",
    "AdamState",
    "Checkpoint",
    "Conv1d",
    "LSTM",
    "Linear",
    "Module",
    "ShapeError",
    "Tensor",
    "adam_step",
    "clip_grad_norm",
    "concat",
    "functional",
    "kernels",
    "no_grad",
    "stack",
    "tensor",
]
