"""Minimal dense-tensor engine: autodiff, PRNG, convolutions, gradcheck, IO."""

from .conv import conv3d, conv_transpose3d
from .gradcheck import GradcheckReport, OracleError, gradcheck, scaled_backward
from .norms import instance_norm3d, layer_norm
from .prng import Prng
from .serial import (
    FormatError,
    load_container,
    load_tensor,
    save_container,
    save_tensor,
)
from .tensor import (
    DtypeError,
    EngineError,
    GraphError,
    NonFiniteError,
    RunStats,
    ShapeError,
    Tensor,
    abs_,
    add,
    assert_finite,
    backward,
    concat,
    cummax,
    cumsum,
    div,
    dtype_name,
    einsum,
    exp,
    flip,
    grad_enabled,
    leaky_relu,
    log,
    log_softmax,
    matmul,
    maximum,
    mean,
    mul,
    narrow,
    neg,
    no_grad,
    relu,
    reshape,
    resolve_dtype,
    set_debug_checks,
    sigmoid,
    silu,
    softmax,
    stack,
    sub,
    sum_,
    take_row,
    tanh,
    track_stats,
    transpose,
    zero_grads,
)

__all__ = [
    "Tensor",
    "Prng",
    "EngineError",
    "ShapeError",
    "DtypeError",
    "GraphError",
    "NonFiniteError",
    "OracleError",
    "FormatError",
    "GradcheckReport",
    "RunStats",
    "no_grad",
    "track_stats",
    "grad_enabled",
    "set_debug_checks",
    "backward",
    "zero_grads",
    "gradcheck",
    "scaled_backward",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "abs_",
    "exp",
    "log",
    "tanh",
    "sigmoid",
    "silu",
    "relu",
    "leaky_relu",
    "maximum",
    "sum_",
    "mean",
    "cumsum",
    "cummax",
    "reshape",
    "transpose",
    "flip",
    "concat",
    "stack",
    "take_row",
    "narrow",
    "matmul",
    "einsum",
    "softmax",
    "log_softmax",
    "layer_norm",
    "instance_norm3d",
    "conv3d",
    "conv_transpose3d",
    "assert_finite",
    "save_tensor",
    "load_tensor",
    "save_container",
    "load_container",
    "resolve_dtype",
    "dtype_name",
]
