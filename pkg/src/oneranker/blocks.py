"""Shared decoder building blocks: attention sublayers, feed-forward, norms."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import AttentionMask, Tensor, masked_attention

INIT_STD = 0.02


def init_param(rng: np.random.Generator, *shape, std: float = INIT_STD) -> Tensor:
    return Tensor(rng.standard_normal(shape) * std, requires_grad=True)


def zeros_param(*shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def ones_param(*shape) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True)


class AttentionSublayer:
    """Projected multi-head attention: out = attn(xW_q, kvW_k, kvW_v) W_o."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        if dim % heads != 0:
            raise ValueError(f"heads={heads} must divide dim={dim}")
        self.heads = heads
        self.wq = init_param(rng, dim, dim)
        self.wk = init_param(rng, dim, dim)
        self.wv = init_param(rng, dim, dim)
        self.wo = init_param(rng, dim, dim)

    def __call__(self, x: Tensor, kv: Tensor, mask: AttentionMask) -> Tensor:
        q = T.matmul(x, self.wq)
        k = T.matmul(kv, self.wk)
        v = T.matmul(kv, self.wv)
        return T.matmul(masked_attention(q, k, v, mask, self.heads), self.wo)

    def params(self, prefix: str) -> dict:
        return {f"{prefix}.wq": self.wq, f"{prefix}.wk": self.wk,
                f"{prefix}.wv": self.wv, f"{prefix}.wo": self.wo}


class FeedForward:
    def __init__(self, dim: int, hidden: int, rng: np.random.Generator):
        self.w1 = init_param(rng, dim, hidden)
        self.b1 = zeros_param(hidden)
        self.w2 = init_param(rng, hidden, dim)
        self.b2 = zeros_param(dim)

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(T.silu(T.linear(x, self.w1, self.b1)), self.w2, self.b2)

    def params(self, prefix: str) -> dict:
        return {f"{prefix}.w1": self.w1, f"{prefix}.b1": self.b1,
                f"{prefix}.w2": self.w2, f"{prefix}.b2": self.b2}


class LayerNorm:
    def __init__(self, dim: int):
        self.gain = ones_param(dim)
        self.bias = zeros_param(dim)

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias)

    def params(self, prefix: str) -> dict:
        return {f"{prefix}.g": self.gain, f"{prefix}.b": self.bias}


class DecoderLayer:
    """Pre-norm decoder layer: optional cross-attention, self-attention, FFN.

    ``cross_first`` selects whether cross-attention runs before
    self-attention within the layer.
    """

    def __init__(self, dim: int, heads: int, ffn_dim: int, rng: np.random.Generator,
                 cross: bool = False):
        self.cross = cross
        if cross:
            self.cross_attn = AttentionSublayer(dim, heads, rng)
            self.ln_cross = LayerNorm(dim)
        self.self_attn = AttentionSublayer(dim, heads, rng)
        self.ln_self = LayerNorm(dim)
        self.ffn = FeedForward(dim, ffn_dim, rng)
        self.ln_ffn = LayerNorm(dim)

    def __call__(self, x: Tensor, self_mask: AttentionMask,
                 kv: Tensor | None = None, cross_first: bool = True) -> Tensor:
        def run_cross(h):
            mask = AttentionMask.full(h.shape[0], kv.shape[0])
            return T.add(h, self.cross_attn(self.ln_cross(h), kv, mask))

        def run_self(h):
            normed = self.ln_self(h)
            return T.add(h, self.self_attn(normed, normed, self_mask))

        if self.cross:
            if kv is None:
                raise ValueError("cross-attention layer needs a KV sequence")
            x = run_cross(x) if cross_first else x
            x = run_self(x)
            x = x if cross_first else run_cross(x)
        else:
            x = run_self(x)
        return T.add(x, self.ffn(self.ln_ffn(x)))

    def params(self, prefix: str) -> dict:
        out = {}
        if self.cross:
            out.update(self.cross_attn.params(f"{prefix}.cross"))
            out.update(self.ln_cross.params(f"{prefix}.lnc"))
        out.update(self.self_attn.params(f"{prefix}.self"))
        out.update(self.ln_self.params(f"{prefix}.lns"))
        out.update(self.ffn.params(f"{prefix}.ffn"))
        out.update(self.ln_ffn.params(f"{prefix}.lnf"))
        return out
