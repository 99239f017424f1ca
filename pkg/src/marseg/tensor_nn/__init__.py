"""Minimal reverse-mode differentiable compute substrate on numpy."""
from .conv import conv2d, gather_pixels, max_pool2, upsample2
from .optim import (
    Adam,
    OptimizerStateError,
    ParameterSet,
    bias_uniform,
    kaiming_uniform,
    load_checkpoint,
    save_checkpoint,
)
from .tensor import (
    Segments,
    Tensor,
    add,
    as_tensor,
    binary_cross_entropy_with_logits,
    concat,
    dot,
    grad_enabled,
    linear,
    matmul,
    mean_all,
    mul,
    no_grad,
    relu,
    reshape,
    segment_mean,
    softmax_cross_entropy,
    sub,
    sum_all,
    take,
)

__all__ = [
    "Adam",
    "OptimizerStateError",
    "ParameterSet",
    "Segments",
    "Tensor",
    "add",
    "as_tensor",
    "bias_uniform",
    "binary_cross_entropy_with_logits",
    "concat",
    "conv2d",
    "dot",
    "gather_pixels",
    "grad_enabled",
    "kaiming_uniform",
    "linear",
    "load_checkpoint",
    "matmul",
    "max_pool2",
    "mean_all",
    "mul",
    "no_grad",
    "relu",
    "reshape",
    "save_checkpoint",
    "segment_mean",
    "softmax_cross_entropy",
    "sub",
    "sum_all",
    "take",
    "upsample2",
]
