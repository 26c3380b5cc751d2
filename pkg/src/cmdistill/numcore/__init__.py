"""Numeric core: tensors, reverse-mode autodiff, seeded RNG, gradient checks."""

from . import ops
from .gradcheck import grad_check, numeric_grad
from .ops import (
    PROB_FLOOR,
    add,
    concat,
    conv1d,
    cross_entropy,
    embedding,
    exp,
    gelu,
    kl_divergence,
    kl_from_logits,
    l2_norm,
    layer_norm,
    log,
    log_softmax,
    matmul,
    mean,
    mul,
    softmax,
    stack,
    sub,
)
from .rng import Rng
from .tensor import Tensor, as_tensor, backward, grad_enabled, no_grad

__all__ = [
    "PROB_FLOOR", "Rng", "Tensor", "add", "as_tensor", "backward", "concat", "conv1d",
    "cross_entropy", "embedding", "exp", "gelu", "grad_check", "grad_enabled",
    "kl_divergence", "kl_from_logits", "l2_norm", "layer_norm", "log", "log_softmax",
    "matmul", "mean", "mul", "no_grad", "numeric_grad", "ops", "softmax", "stack", "sub",
]
