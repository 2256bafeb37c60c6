"""Dense tensors with reverse-mode autodiff, Adam, gradient checking and
checkpoint I/O."""

from . import ops
from .checkpoint import load_checkpoint, save_checkpoint
from .gradcheck import GradCheckReport, gradient_check
from .ops import (
    Segments,
    add,
    bce_with_logits,
    concat,
    dropout,
    dropout_mask,
    gather,
    getitem,
    layer_norm,
    matmul,
    mul,
    reduce_mean,
    reduce_sum,
    relu,
    reshape,
    row_softmax,
    segment_softmax,
    segment_sum,
    sigmoid,
    sub,
    transpose,
)
from .optim import Adam, adam_step
from .params import ParamStore
from .tensor import BACKWARD, Tensor, debug_mode, no_grad, set_debug

__all__ = [
    "Adam", "BACKWARD", "GradCheckReport", "ParamStore", "Segments", "Tensor",
    "adam_step", "add", "bce_with_logits", "concat", "debug_mode", "dropout",
    "dropout_mask", "gather", "getitem", "gradient_check", "layer_norm",
    "load_checkpoint", "matmul", "mul", "no_grad", "ops", "reduce_mean",
    "reduce_sum", "relu", "reshape", "row_softmax", "save_checkpoint",
    "segment_softmax", "segment_sum", "set_debug", "sigmoid", "sub", "transpose",
]
