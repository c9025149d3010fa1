"""Minimal numpy autodiff: tensors, layers, losses, optimizers, checkpoints."""

from .tensor import (
    ShapeError,
    Tensor,
    add,
    conv2d,
    instance_norm,
    leaky_relu,
    matmul,
    max_pool2,
    mul,
    relu,
    reshape,
    sigmoid,
    tanh_act,
    tmean,
    tsum,
    upsample_nearest2,
)
from .layers import Conv2d, InstanceNorm2d, Linear, Module
from .losses import bce_with_logits, l1_loss, mse_loss
from .optim import Adam, RMSprop
from .checkpoint import CHECKPOINT_FORMAT, load_checkpoint, save_checkpoint

__all__ = [
    "ShapeError",
    "Tensor",
    "add",
    "conv2d",
    "instance_norm",
    "leaky_relu",
    "matmul",
    "max_pool2",
    "mul",
    "relu",
    "reshape",
    "sigmoid",
    "tanh_act",
    "tmean",
    "tsum",
    "upsample_nearest2",
    "Conv2d",
    "InstanceNorm2d",
    "Linear",
    "Module",
    "bce_with_logits",
    "l1_loss",
    "mse_loss",
    "Adam",
    "RMSprop",
    "CHECKPOINT_FORMAT",
    "load_checkpoint",
    "save_checkpoint",
]
