"""Array substrate: Tensor, reverse-mode tape, primitive ops, gradient checks."""

from . import kernels
from .gradcheck import finite_diff_check
from .ops import (
    add,
    affine,
    bias_add_rows,
    broadcast_spatial,
    concat_batch,
    concat_channels,
    conv2d,
    crop2d,
    group_norm,
    matmul,
    mean_absolute_error,
    mean_all,
    mean_squared_error,
    mul,
    silu,
    slice_batch,
    sub,
    sum_all,
    tanh,
    upsample_nearest2x,
)
from .tensor import ShapeError, Tensor, backward, grad_enabled, no_grad

__all__ = [
    "Tensor",
    "ShapeError",
    "backward",
    "no_grad",
    "grad_enabled",
    "finite_diff_check",
    "kernels",
    "add",
    "sub",
    "mul",
    "affine",
    "silu",
    "tanh",
    "mean_all",
    "sum_all",
    "mean_squared_error",
    "mean_absolute_error",
    "concat_channels",
    "concat_batch",
    "slice_batch",
    "crop2d",
    "broadcast_spatial",
    "upsample_nearest2x",
    "matmul",
    "bias_add_rows",
    "conv2d",
    "group_norm",
]
