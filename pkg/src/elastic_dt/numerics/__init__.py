"""Dense tensor math, reverse-mode gradients, AdamW, and gradient checking."""

from .check import GradCheckReport, finite_diff_check, reverse_gradient
from .engine import (
    NumericFault,
    Tensor,
    add,
    concat,
    cross_entropy_logits,
    div,
    embedding,
    expectile_l2,
    gelu,
    layer_norm,
    log_softmax,
    masked_mean,
    masked_softmax,
    matmul,
    mul,
    power,
    reduce_mean,
    reduce_sum,
    reshape,
    softmax,
    squared_error,
    take_along_last,
    take_slice,
    tanh,
    transpose,
)
from .optim import (
    ADAM_BETAS,
    ADAM_EPS,
    CLIP_MAX_NORM,
    adamw_update,
    clip_global_norm,
    global_grad_norm,
)
from .params import ParamStore

__all__ = [
    "ADAM_BETAS",
    "ADAM_EPS",
    "CLIP_MAX_NORM",
    "GradCheckReport",
    "NumericFault",
    "ParamStore",
    "Tensor",
    "adamw_update",
    "add",
    "clip_global_norm",
    "concat",
    "cross_entropy_logits",
    "div",
    "embedding",
    "expectile_l2",
    "finite_diff_check",
    "gelu",
    "global_grad_norm",
    "layer_norm",
    "log_softmax",
    "masked_mean",
    "masked_softmax",
    "matmul",
    "mul",
    "power",
    "reduce_mean",
    "reduce_sum",
    "reshape",
    "reverse_gradient",
    "softmax",
    "squared_error",
    "take_along_last",
    "take_slice",
    "tanh",
    "transpose",
]
