"""Minimal numpy-backed reverse-mode engine: tensors, layers, losses, optimizers."""
from .functional import (
    batch_norm2d,
    bce_logits_loss,
    concat,
    conv2d,
    leaky_relu,
    mse_loss,
    pointwise,
    pool2d,
    relu,
    sigmoid,
    softmax,
    softmax_ce_loss,
    upsample2d,
)
from .optim import OptState, adam, opt_step, poly_lr, sgd
from .params import ParamSet
from .tensor import Tensor, default_dtype, grad_enabled, no_grad, precision, set_default_dtype

__all__ = [
    "Tensor", "ParamSet", "OptState",
    "conv2d", "pool2d", "upsample2d", "concat", "batch_norm2d",
    "relu", "leaky_relu", "sigmoid", "softmax", "pointwise",
    "softmax_ce_loss", "mse_loss", "bce_logits_loss",
    "sgd", "adam", "opt_step", "poly_lr",
    "default_dtype", "set_default_dtype", "precision", "no_grad", "grad_enabled",
]
