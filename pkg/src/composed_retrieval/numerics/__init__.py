"""Minimal float64 tensor engine: autodiff ops and the Adam optimizer."""

from .gradcheck import check_gradients, numerical_gradient, relative_error
from .optim import AdamState, LRGroup, Parameter, adam_step, zero_grads
from .tensor import (
    Tensor,
    add,
    add_bias,
    as_tensor,
    backward,
    clip,
    concat,
    div,
    dropout,
    elementwise,
    exp,
    index,
    l2_normalize,
    layer_norm,
    linear,
    log,
    log_softmax,
    masked_softmax,
    matmul,
    mean,
    mul,
    neg,
    relu,
    reshape,
    scale_by,
    sigmoid,
    softmax,
    sub,
    sum,
    take_rows,
    tensor,
    transpose,
)

__all__ = [
    "AdamState",
    "LRGroup",
    "Parameter",
    "Tensor",
    "adam_step",
    "add",
    "add_bias",
    "as_tensor",
    "backward",
    "check_gradients",
    "clip",
    "concat",
    "div",
    "dropout",
    "elementwise",
    "exp",
    "index",
    "l2_normalize",
    "layer_norm",
    "linear",
    "log",
    "log_softmax",
    "masked_softmax",
    "matmul",
    "mean",
    "mul",
    "neg",
    "numerical_gradient",
    "relative_error",
    "relu",
    "reshape",
    "scale_by",
    "sigmoid",
    "softmax",
    "sub",
    "sum",
    "take_rows",
    "tensor",
    "transpose",
    "zero_grads",
]
