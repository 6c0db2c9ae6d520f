"""Minimal dense-tensor engine with reverse-mode differentiation."""

from .functional import (
    BatchNormState,
    ConvParams,
    adaptive_avgpool2d,
    batchnorm2d,
    broadcast_mul,
    conv2d,
    conv2d_dilated,
    conv_output_size,
    dropout,
    linear,
    classwise_bce,
    maxpool2d,
    one_hot,
    relu,
    resize_bilinear,
    softmax,
    softmax_cross_entropy,
    softplus,
)
from .gradcheck import GradCheckResult, grad_check, grad_check_detailed, numerical_grad
from .optim import SGD, sgd_step
from .tensor import NumericError, Tensor, concat, no_grad

__all__ = [
    "BatchNormState", "ConvParams", "NumericError", "SGD", "Tensor",
    "adaptive_avgpool2d", "batchnorm2d", "broadcast_mul", "concat", "conv2d", "conv2d_dilated",
    "conv_output_size", "dropout", "GradCheckResult", "grad_check", "grad_check_detailed", "linear", "classwise_bce", "maxpool2d",
    "no_grad", "numerical_grad", "one_hot", "relu", "resize_bilinear", "sgd_step",
    "softmax", "softmax_cross_entropy", "softplus",
]
