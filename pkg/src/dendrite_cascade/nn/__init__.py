"""Minimal float64 tensor library with a reverse-mode tape."""

from .checkpoint import load_checkpoint, load_into, save_checkpoint
from .ops import (bce_loss, concat_channels, conv2d, dense, group_norm, l2_loss,
                  max_pool_2x2, relu, residual_add, sigmoid, upsample_2x_nearest,
                  weighted_sum)
from .optim import OptimizerState, optimizer_step
from .params import ParamStore
from .tensor import Tape, Tensor

__all__ = [
    "Tape", "Tensor", "ParamStore", "OptimizerState", "optimizer_step",
    "conv2d", "relu", "max_pool_2x2", "upsample_2x_nearest", "group_norm",
    "concat_channels", "residual_add", "dense", "l2_loss", "bce_loss",
    "weighted_sum", "sigmoid", "save_checkpoint", "load_checkpoint", "load_into",
    "backward",
]


def backward(tape, loss):
    """Functional alias for ``tape.backward(loss)``."""
    tape.backward(loss)
