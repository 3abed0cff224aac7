"""Attention and transformer building blocks."""

from __future__ import annotations

import math

import numpy as np

from .. import numerics as nx
from ..numerics import MLP, LayerNorm, Linear, Module, Tensor


class Attention(Module):
    """Multi-head scaled dot-product attention with output projection."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        super().__init__()
        self.heads = heads
        self.q = Linear(dim, dim, rng)
        self.k = Linear(dim, dim, rng)
        self.v = Linear(dim, dim, rng)
        self.out = Linear(dim, dim, rng)

    def _split(self, x: Tensor) -> Tensor:
        b, n, d = x.shape
        return x.reshape(b, n, self.heads, d // self.heads).transpose(0, 2, 1, 3)

    def weights(self, q_in: Tensor, k_in: Tensor) -> Tensor:
        q, k = self._split(self.q(q_in)), self._split(self.k(k_in))
        dk = q.shape[-1]
        return nx.softmax(nx.matmul(q, nx.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(dk)), axis=-1)

    def __call__(self, q_in: Tensor, k_in: Tensor, v_in: Tensor) -> Tensor:
        if q_in.shape[-1] != k_in.shape[-1] or k_in.shape[-1] != v_in.shape[-1]:
            raise nx.ShapeError(f"attention: feature dims differ {q_in.shape} {k_in.shape} {v_in.shape}")
        attn = self.weights(q_in, k_in)
        o = nx.matmul(attn, self._split(self.v(v_in)))  # (B, h, Nq, dk)
        b, h, n, dk = o.shape
        return self.out(o.transpose(0, 2, 1, 3).reshape(b, n, h * dk))


def cross_attention(attn: Attention, queries: Tensor, keys_values: Tensor) -> Tensor:
    return attn(queries, keys_values, keys_values)


class FeedForward(Module):
    def __init__(self, dim: int, hidden: int, rng: np.random.Generator):
        super().__init__()
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(nx.gelu(self.fc1(x)))


class EncoderBlock(Module):
    """Pre-norm self-attention block."""

    def __init__(self, dim: int, heads: int, hidden: int, rng: np.random.Generator):
        super().__init__()
        self.norm1 = LayerNorm(dim)
        self.attn = Attention(dim, heads, rng)
        self.norm2 = LayerNorm(dim)
        self.mlp = FeedForward(dim, hidden, rng)

    def __call__(self, x: Tensor) -> Tensor:
        h = self.norm1(x)
        x = x + self.attn(h, h, h)
        return x + self.mlp(self.norm2(x))


class TwoWayLayer(Module):
    """Token self-attention, token-to-image, token MLP, image-to-token."""

    def __init__(self, dim: int, heads: int, hidden: int, rng: np.random.Generator):
        super().__init__()
        self.self_attn = Attention(dim, heads, rng)
        self.norm1 = LayerNorm(dim)
        self.token_to_image = Attention(dim, heads, rng)
        self.norm2 = LayerNorm(dim)
        self.mlp = MLP([dim, hidden, dim], rng)
        self.norm3 = LayerNorm(dim)
        self.image_to_token = Attention(dim, heads, rng)
        self.norm4 = LayerNorm(dim)

    def __call__(self, queries: Tensor, keys: Tensor, query_pe: Tensor, key_pe: Tensor):
        q = queries + query_pe
        queries = self.norm1(queries + self.self_attn(q, q, queries))
        q = queries + query_pe
        queries = self.norm2(queries + self.token_to_image(q, keys + key_pe, keys))
        queries = self.norm3(queries + self.mlp(queries))
        q = queries + query_pe
        keys = self.norm4(keys + self.image_to_token(keys + key_pe, q, queries))
        return queries, keys
