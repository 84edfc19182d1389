"""Minimal reverse-mode automatic differentiation on float64 numpy arrays."""

from .gradcheck import GradCheckReport, finite_difference_check
from .nn import BatchNorm, Conv2d, Linear, Module, glorot_uniform
from .ops import (
    EPS_CLAMP,
    avg_pool_global,
    batch_norm,
    binary_ce,
    branch_trace,
    concat,
    conv2d,
    fully_connected,
    note_branch,
    leaky_relu,
    relu,
    roi_pool,
    sigmoid,
    smooth_l1,
    softmax,
    softmax_ce,
    take_rows,
)
from .optim import SgdOptimizer, sgd_step
from .tensor import ShapeError, Tape, Tensor, as_tensor, backward, no_grad, parameter

__all__ = [
    "EPS_CLAMP",
    "BatchNorm",
    "Conv2d",
    "GradCheckReport",
    "Linear",
    "Module",
    "SgdOptimizer",
    "ShapeError",
    "Tape",
    "Tensor",
    "as_tensor",
    "avg_pool_global",
    "backward",
    "batch_norm",
    "binary_ce",
    "branch_trace",
    "concat",
    "conv2d",
    "finite_difference_check",
    "fully_connected",
    "note_branch",
    "glorot_uniform",
    "no_grad",
    "parameter",
    "leaky_relu",
    "relu",
    "roi_pool",
    "sgd_step",
    "sigmoid",
    "smooth_l1",
    "softmax",
    "softmax_ce",
    "take_rows",
]
