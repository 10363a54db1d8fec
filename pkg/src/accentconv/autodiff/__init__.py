"""Minimal reverse-mode differentiation over numpy arrays."""

from .tensor import (
    NonFiniteError,
    Tensor,
    as_tensor,
    backward,
    default_dtype,
    get_default_dtype,
    is_grad_enabled,
    no_grad,
    set_default_dtype,
)
from . import ops
from .ops import (
    abs_,
    add,
    broadcast_to,
    clamp,
    concat,
    conv1d,
    conv1d_output_length,
    conv_transpose1d,
    conv_transpose1d_output_length,
    cos,
    div,
    dropout,
    embedding_lookup,
    exp,
    getitem,
    glu,
    l2_normalize,
    layer_norm,
    log,
    log_softmax,
    masked_fill,
    matmul,
    mean,
    mul,
    neg,
    pad_time,
    power,
    relu,
    reshape,
    scaled_dot_attention,
    sigmoid,
    sin,
    softmax,
    sqrt,
    sub,
    sum_,
    swapaxes,
    swish,
    tanh,
    transpose,
)
from .gradcheck import grad_check
from .optim import SGD, AdamW, CosineAnnealing, cosine_lr

__all__ = [name for name in dir() if not name.startswith("_")]
