"""Minimal reverse-mode autodiff over dense float64 arrays."""

from .tensor import (Tensor, Tape, ShapeError, recording, paused, active_tape,
                     backward, as_tensor)
from .ops import (
    add, sub, mul, div, neg, matmul, exp, log, sqrt, relu, sigmoid, softplus,
    absolute, square, tsum, tmean, l2norm, softmax, reshape, broadcast_to,
    transpose, getitem, concat, RowGather, take_rows, weighted_rows, scatter_rows,
    exclusive_cumsum, layer_norm, segment_mean_rows,
)
from .conv import conv2d, nearest_upsample2, sparse_conv3d
from .checkpoint import save_arrays, load_arrays

__all__ = [
    "Tensor", "Tape", "ShapeError", "recording", "paused", "active_tape", "backward",
    "as_tensor", "add", "sub", "mul", "div", "neg", "matmul", "exp", "log",
    "sqrt", "relu", "sigmoid", "softplus", "absolute", "square", "tsum",
    "tmean", "l2norm", "softmax", "reshape", "broadcast_to", "transpose",
    "getitem", "concat", "RowGather", "take_rows", "weighted_rows", "scatter_rows",
    "exclusive_cumsum", "layer_norm", "segment_mean_rows", "conv2d", "nearest_upsample2",
    "sparse_conv3d", "save_arrays", "load_arrays",
]
