"""Differentiable numpy substrate: tensors, ops, AMSGrad, initialisers."""

from . import functional
from .functional import (
    concat,
    conv2d,
    dense,
    leaky_relu,
    max_pool2d,
    upsample_nearest,
)
from .init import fan_in, msra_init
from .optim import Adam, AdamState, NonFiniteGradientError, adam_amsgrad_step
from .tensor import (
    Tensor,
    as_tensor,
    backward,
    default_dtype,
    frozen,
    is_grad_enabled,
    no_grad,
    precision,
    set_default_dtype,
    zero_grad,
)

__all__ = [
    "Adam",
    "AdamState",
    "NonFiniteGradientError",
    "Tensor",
    "adam_amsgrad_step",
    "as_tensor",
    "backward",
    "concat",
    "conv2d",
    "default_dtype",
    "dense",
    "fan_in",
    "frozen",
    "functional",
    "is_grad_enabled",
    "leaky_relu",
    "max_pool2d",
    "msra_init",
    "no_grad",
    "precision",
    "set_default_dtype",
    "upsample_nearest",
    "zero_grad",
]
