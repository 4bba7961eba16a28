"""Composable layers over the tensor substrate.

Initialization is scaled uniform by fan-in. Every layer exposes
``parameters()`` so optimizers and checkpoints can walk the model.
"""

from __future__ import annotations

import math

import numpy as np

from .rng import RngState
from .tensor import (
    Parameter,
    Tensor,
    add,
    gelu,
    layer_norm,
    linear,
    multi_head_self_attention,
)


class Linear:
    def __init__(self, name: str, d_in: int, d_out: int, rng: RngState):
        bound = 1.0 / math.sqrt(d_in)
        self.w = Parameter(f"{name}.w", rng.uniform(-bound, bound, size=(d_in, d_out)))
        self.b = Parameter(f"{name}.b", np.zeros(d_out, dtype=np.float32))

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.w, self.b)

    def parameters(self):
        return [self.w, self.b]


class LayerNorm:
    def __init__(self, name: str, dim: int):
        self.gamma = Parameter(f"{name}.gamma", np.ones(dim, dtype=np.float32))
        self.beta = Parameter(f"{name}.beta", np.zeros(dim, dtype=np.float32))

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta)

    def parameters(self):
        return [self.gamma, self.beta]


class SelfAttention:
    def __init__(self, name: str, dim: int, heads: int, rng: RngState):
        if dim % heads != 0:
            raise ValueError(f"embed dim {dim} not divisible by {heads} heads")
        self.heads = heads
        self.wq = Linear(f"{name}.wq", dim, dim, rng)
        self.wk = Linear(f"{name}.wk", dim, dim, rng)
        self.wv = Linear(f"{name}.wv", dim, dim, rng)
        self.wo = Linear(f"{name}.wo", dim, dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return multi_head_self_attention(
            x,
            self.heads,
            self.wq.w, self.wq.b,
            self.wk.w, self.wk.b,
            self.wv.w, self.wv.b,
            self.wo.w, self.wo.b,
        )

    def parameters(self):
        return (
            self.wq.parameters() + self.wk.parameters()
            + self.wv.parameters() + self.wo.parameters()
        )


_MLP_RATIO = 4


class TransformerBlock:
    """Pre-norm block: x + attn(ln(x)), then x + mlp(ln(x))."""

    def __init__(self, name: str, dim: int, heads: int, rng: RngState):
        self.ln1 = LayerNorm(f"{name}.ln1", dim)
        self.attn = SelfAttention(f"{name}.attn", dim, heads, rng)
        self.ln2 = LayerNorm(f"{name}.ln2", dim)
        self.fc1 = Linear(f"{name}.fc1", dim, _MLP_RATIO * dim, rng)
        self.fc2 = Linear(f"{name}.fc2", _MLP_RATIO * dim, dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        x = add(x, self.attn(self.ln1(x)))
        return add(x, self.fc2(gelu(self.fc1(self.ln2(x)))))

    def parameters(self):
        return (
            self.ln1.parameters() + self.attn.parameters()
            + self.ln2.parameters() + self.fc1.parameters() + self.fc2.parameters()
        )
