"""Minimal reverse-mode differentiable tensor engine (float64, numpy-backed)."""

from .engine import (
    Tape,
    Tensor,
    active_tape,
    as_tensor,
    debug_checks_enabled,
    glorot_uniform,
    record_op,
    set_debug_checks,
)
from .gradcheck import GradCheckReport, grad_check
from .ops import (
    BatchNormState,
    absval,
    add,
    add_channel_bias,
    batch_mean,
    batchnorm,
    channel_map,
    concat_channels,
    conv1d_time,
    glu,
    hadamard,
    matmul,
    node_mix,
    regularized_pinv,
    relu,
    reshape,
    scale,
    sigmoid,
    slice_time,
    softmax_rows,
    sub,
    sum_all,
    sym_normalize,
    sym_normalize_np,
    transpose2d,
)

__all__ = [
    "Tape",
    "Tensor",
    "active_tape",
    "as_tensor",
    "debug_checks_enabled",
    "glorot_uniform",
    "record_op",
    "set_debug_checks",
    "GradCheckReport",
    "grad_check",
    "BatchNormState",
    "absval",
    "add",
    "add_channel_bias",
    "batch_mean",
    "batchnorm",
    "channel_map",
    "concat_channels",
    "conv1d_time",
    "glu",
    "hadamard",
    "matmul",
    "node_mix",
    "regularized_pinv",
    "relu",
    "reshape",
    "scale",
    "sigmoid",
    "slice_time",
    "softmax_rows",
    "sub",
    "sum_all",
    "sym_normalize",
    "sym_normalize_np",
    "transpose2d",
]
