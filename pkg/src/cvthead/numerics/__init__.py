"""Minimal dense tensor library with reverse-mode autodiff on a tape."""
from .tensor import (
    GradTape,
    Tensor,
    active_tape,
    apply_op,
    as_tensor,
    backward,
    checked_enabled,
    set_checked,
)
from .ops import (
    absval,
    activation,
    add,
    concat,
    conv2d,
    div,
    gelu,
    layer_norm,
    log,
    matmul,
    mean,
    mul,
    narrow,
    neg,
    relu,
    reshape,
    sigmoid,
    softmax,
    sub,
    sum_,
    tanh,
    transpose,
    upsample2x,
)
from .gradcheck import GradCheckReport, grad_check, standard_checks
from .container import load_container, save_container

__all__ = [
    "Tensor", "GradTape", "backward", "active_tape", "apply_op", "as_tensor",
    "set_checked", "checked_enabled",
    "add", "sub", "mul", "div", "neg", "matmul", "transpose", "reshape",
    "concat", "narrow", "sum_", "mean", "absval", "log", "activation", "relu",
    "gelu", "tanh", "sigmoid", "softmax", "layer_norm", "conv2d", "upsample2x",
    "grad_check", "GradCheckReport", "standard_checks",
    "save_container", "load_container",
]
