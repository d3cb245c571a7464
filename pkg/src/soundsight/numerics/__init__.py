"""Tensor algebra, reverse-mode autodiff, Adam, and gradient checking."""

from .gradcheck import NonFiniteLossError, grad_check
from .nn import LSTMCell, MLP, Conv2d, Linear, Module
from .optim import Adam, AdamState, adam_step, clip_grad_norm
from .tensor import (
    DegenerateNormError,
    Tensor,
    add,
    as_tensor,
    clip,
    concat,
    conv2d,
    default_dtype,
    div,
    dot,
    exp,
    get_default_dtype,
    getitem,
    is_grad_enabled,
    l2_normalize,
    log,
    log_softmax,
    logsumexp,
    matmul,
    maximum,
    mean,
    minimum,
    mul,
    neg,
    no_grad,
    relu,
    reshape,
    set_default_dtype,
    sigmoid,
    softmax,
    square,
    stack,
    sub,
    take_along,
    tanh,
    transpose,
    tsum,
    where,
)

__all__ = [name for name in dir() if not name.startswith("_")]
