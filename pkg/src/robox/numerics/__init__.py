"""Minimal float64 tensor engine with reverse-mode autodiff."""

from .tensor import (
    ComputationTape,
    ShapeError,
    Tensor,
    absolute,
    add,
    as_tensor,
    backward,
    broadcast_to,
    clip,
    concat,
    conv2d,
    cos,
    div,
    exp,
    gelu,
    getitem,
    grad_check,
    is_grad_enabled,
    layer_norm,
    log,
    matmul,
    maximum,
    mean,
    minimum,
    mul,
    no_grad,
    power,
    relu,
    reshape,
    sigmoid,
    sin,
    softmax,
    softplus,
    sqrt,
    stack,
    sub,
    sum,
    swapaxes,
    tanh,
    transpose,
    upsample2x_nearest,
)
from .nn import MLP, Conv2d, LayerNorm, Linear, Module, ModuleList, Parameter
from .optim import AdamW
