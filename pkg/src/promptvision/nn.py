"""Small layer library on top of the tensor primitives.

Modules register parameters through attribute assignment; `parameters()`
returns a flat dict of dotted-path names, which is also the checkpoint
namespace.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor

INIT_STD = 0.02


class Module:
    def parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        self._collect("", out)
        return out

    def _collect(self, prefix: str, out: dict[str, Tensor]):
        for attr, val in vars(self).items():
            path = f"{prefix}{attr}"
            if isinstance(val, Tensor):
                if val.requires_grad:
                    out[path] = val
            elif isinstance(val, Module):
                val._collect(path + ".", out)
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        item._collect(f"{path}.{i}.", out)
                    elif isinstance(item, Tensor) and item.requires_grad:
                        out[f"{path}.{i}"] = item
            elif isinstance(val, dict):
                for key, item in val.items():
                    if isinstance(item, Module):
                        item._collect(f"{path}.{key}.", out)
                    elif isinstance(item, Tensor) and item.requires_grad:
                        out[f"{path}.{key}"] = item


def param(rng: np.random.Generator, *shape, std=INIT_STD) -> Tensor:
    return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True)


def zeros_param(*shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def ones_param(*shape) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True)


class Linear(Module):
    def __init__(self, rng, d_in, d_out, zero_init=False):
        if zero_init:
            self.weight = zeros_param(d_in, d_out)
        else:
            self.weight = param(rng, d_in, d_out)
        self.bias = zeros_param(d_out)

    def __call__(self, x):
        return T.add(T.matmul(x, self.weight), self.bias)


class LayerNorm(Module):
    def __init__(self, d):
        self.gain = ones_param(d)
        self.bias = zeros_param(d)

    def __call__(self, x):
        return T.layer_norm(x, self.gain, self.bias)


class Embedding(Module):
    def __init__(self, rng, n, d):
        self.table = param(rng, n, d)

    def __call__(self, ids):
        return T.embedding_lookup(self.table, ids)


class MLP(Module):
    """Stack of linears with GELU between; final layer is linear."""

    def __init__(self, rng, dims, zero_init_last=False):
        self.layers = [
            Linear(rng, dims[i], dims[i + 1], zero_init=(zero_init_last and i == len(dims) - 2))
            for i in range(len(dims) - 1)
        ]

    def __call__(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = T.gelu(x)
        return x


class MultiHeadAttention(Module):
    """Scaled dot-product attention over (B, T, d) sequences.

    Additive masks (broadcastable to (B, heads, Tq, Tk), large negative on
    blocked positions) implement padding and causal structure.
    """

    def __init__(self, rng, d_model, heads):
        if d_model % heads:
            raise ValueError(f"d_model {d_model} not divisible by heads {heads}")
        self.heads = heads
        self.d_head = d_model // heads
        self.wq = Linear(rng, d_model, d_model)
        self.wk = Linear(rng, d_model, d_model)
        self.wv = Linear(rng, d_model, d_model)
        self.wo = Linear(rng, d_model, d_model)
        self._scale = 1.0 / np.sqrt(self.d_head)

    def __call__(self, query, keyval, mask=None, return_weights=False):
        b, tq, d = query.shape
        tk = keyval.shape[1]
        q = T.transpose(T.reshape(self.wq(query), (b, tq, self.heads, self.d_head)), (0, 2, 1, 3))
        k = T.transpose(T.reshape(self.wk(keyval), (b, tk, self.heads, self.d_head)), (0, 2, 1, 3))
        v = T.transpose(T.reshape(self.wv(keyval), (b, tk, self.heads, self.d_head)), (0, 2, 1, 3))
        scores = T.mul(T.matmul(q, T.swap_last2(k)), self._scale)
        if mask is not None:
            scores = T.add(scores, mask)
        weights = T.softmax(scores, axis=-1)
        ctx = T.matmul(weights, v)  # (b, h, tq, dh)
        ctx = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (b, tq, d))
        out = self.wo(ctx)
        if return_weights:
            return out, weights
        return out


class FeedForward(Module):
    def __init__(self, rng, d_model, d_hidden):
        self.fc1 = Linear(rng, d_model, d_hidden)
        self.fc2 = Linear(rng, d_hidden, d_model)

    def __call__(self, x):
        return self.fc2(T.gelu(self.fc1(x)))


class EncoderLayer(Module):
    """Pre-activation is skipped: classic post-norm residual blocks."""

    def __init__(self, rng, d_model, heads, d_ff):
        self.attn = MultiHeadAttention(rng, d_model, heads)
        self.norm1 = LayerNorm(d_model)
        self.ff = FeedForward(rng, d_model, d_ff)
        self.norm2 = LayerNorm(d_model)

    def __call__(self, x, mask=None):
        x = self.norm1(T.add(x, self.attn(x, x, mask)))
        x = self.norm2(T.add(x, self.ff(x)))
        return x


class DecoderLayer(Module):
    """Self-attention, cross-attention over a memory, feed-forward."""

    def __init__(self, rng, d_model, heads, d_ff):
        self.self_attn = MultiHeadAttention(rng, d_model, heads)
        self.norm1 = LayerNorm(d_model)
        self.cross_attn = MultiHeadAttention(rng, d_model, heads)
        self.norm2 = LayerNorm(d_model)
        self.ff = FeedForward(rng, d_model, d_ff)
        self.norm3 = LayerNorm(d_model)

    def __call__(self, x, memory, self_mask=None, cross_mask=None):
        x = self.norm1(T.add(x, self.self_attn(x, x, self_mask)))
        x = self.norm2(T.add(x, self.cross_attn(x, memory, cross_mask)))
        x = self.norm3(T.add(x, self.ff(x)))
        return x


NEG_INF = -1e9


def padding_mask(lengths, max_len) -> np.ndarray:
    """Additive mask (B,1,1,max_len): NEG_INF on padded key positions."""
    b = len(lengths)
    m = np.zeros((b, 1, 1, max_len))
    for i, n in enumerate(lengths):
        m[i, 0, 0, n:] = NEG_INF
    return m


def causal_mask(t) -> np.ndarray:
    """Additive (1,1,t,t) mask blocking attention to future positions."""
    m = np.triu(np.full((t, t), NEG_INF), k=1)
    return m[None, None]
