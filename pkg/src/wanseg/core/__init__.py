from wanseg.core.functional import (
    EPS,
    activation,
    avg_pool2d,
    bce,
    concat_channels,
    conv2d,
    dense,
    global_avg_pool,
    leaky_relu,
    max_pool2d,
    relu,
    resize_bilinear,
    sigmoid,
    upsample_nearest,
)
from wanseg.core.gradcheck import grad_check
from wanseg.core.optim import Adam, AdamState, adam_step
from wanseg.core.tensor import Tensor, no_grad, topological_order

__all__ = [
    "EPS", "Adam", "AdamState", "Tensor", "activation", "adam_step", "avg_pool2d", "bce",
    "concat_channels", "conv2d", "dense", "global_avg_pool", "grad_check", "leaky_relu",
    "max_pool2d", "no_grad", "relu", "resize_bilinear", "sigmoid", "topological_order",
    "upsample_nearest",
]
