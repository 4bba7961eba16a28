"""Minimal dense-tensor substrate: autodiff, layers, RNG, optimizer."""

from .layers import LayerNorm, Linear, SelfAttention, TransformerBlock
from .optim import Adam
from .rng import RngState
from .tensor import (
    GraphError,
    Parameter,
    Tensor,
    add,
    assert_finite,
    backward,
    concat,
    cross_entropy,
    dropout,
    expand_batch,
    gather_rows,
    gelu,
    layer_norm,
    linear,
    matmul,
    mean,
    mse_masked,
    mul,
    multi_head_self_attention,
    no_grad,
    reshape,
    scale,
    scatter_rows,
    softmax,
    sub,
    sum_,
    take_rows,
    transpose,
)

__all__ = [
    "Adam",
    "GraphError",
    "LayerNorm",
    "Linear",
    "Parameter",
    "RngState",
    "SelfAttention",
    "Tensor",
    "TransformerBlock",
    "add",
    "assert_finite",
    "backward",
    "concat",
    "cross_entropy",
    "dropout",
    "expand_batch",
    "gather_rows",
    "gelu",
    "layer_norm",
    "linear",
    "matmul",
    "mean",
    "mse_masked",
    "mul",
    "multi_head_self_attention",
    "no_grad",
    "reshape",
    "scale",
    "scatter_rows",
    "softmax",
    "sub",
    "sum_",
    "take_rows",
    "transpose",
]
