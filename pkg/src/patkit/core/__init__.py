"""Tensor core: arrays, autodiff, parameters and gradient checking."""

from .gradcheck import GradCheckReport, grad_check
from .nn import MLP, GroupNorm, LayerNorm, Linear, Module, Parameter, glorot_uniform, norm_groups
from .tensor import (
    Tensor,
    add,
    as_tensor,
    backward,
    concat,
    cross_entropy,
    div,
    dropout,
    elu,
    exp,
    gather_rows,
    get_default_dtype,
    getitem,
    group_norm,
    layer_norm,
    log,
    log_softmax,
    matmul,
    mul,
    neg,
    no_grad,
    precision,
    reduce,
    reshape,
    scale,
    set_default_dtype,
    softmax,
    stack,
    sub,
    transpose,
)
