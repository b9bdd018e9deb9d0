"""Transformer building blocks on top of the autodiff engine.

Pre-layer-norm residual wiring throughout; weights start from a
truncated normal (std 0.02, cut at 2 std), biases and norm offsets at
zero. All randomness comes from explicitly passed generators.
"""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02,
                 dtype=np.float32) -> np.ndarray:
    """Normal(0, std) resampled until every draw lies within 2 std."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2.0 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2.0 * std
    return out.astype(dtype)


class Module:
    """Base with dotted-name parameter discovery.

    Attributes that are parameter Tensors, Modules, or lists of Modules
    are walked in definition order, so names are stable across runs.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for attr, value in vars(self).items():
            name = f"{prefix}{attr}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, Tensor) and item.requires_grad:
                        yield f"{name}.{i}", item

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def assign_names(self, prefix: str = "") -> None:
        for name, p in self.named_parameters(prefix):
            p.name = name


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, dtype=np.float32):
        self.weight = Tensor(trunc_normal(rng, (d_in, d_out), dtype=dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(d_out, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.add(ad.matmul(x, self.weight), self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int, dtype=np.float32, eps: float = 1e-5):
        self.gain = Tensor(np.ones(dim, dtype=dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(dim, dtype=dtype), requires_grad=True)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.gain, self.bias, self.eps)


class Embedding(Module):
    def __init__(self, count: int, dim: int, rng: np.random.Generator, dtype=np.float32):
        self.weight = Tensor(trunc_normal(rng, (count, dim), dtype=dtype), requires_grad=True)

    def __call__(self, ids: np.ndarray) -> Tensor:
        return ad.embedding(self.weight, ids)


class MultiHeadAttention(Module):
    """Standard multi-head attention; queries may differ from keys/values."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, dtype=np.float32):
        if dim % heads != 0:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.wq = Linear(dim, dim, rng, dtype)
        self.wk = Linear(dim, dim, rng, dtype)
        self.wv = Linear(dim, dim, rng, dtype)
        self.wo = Linear(dim, dim, rng, dtype)
        self.heads = heads
        self.head_dim = dim // heads

    def _split(self, x: Tensor) -> Tensor:
        b, n, _ = x.shape
        x = ad.reshape(x, (b, n, self.heads, self.head_dim))
        return ad.transpose(x, (0, 2, 1, 3))

    def __call__(self, q_in: Tensor, kv_in: Tensor, key_mask: np.ndarray | None = None) -> Tensor:
        b, n, d = q_in.shape
        q = self._split(self.wq(q_in))
        k = self._split(self.wk(kv_in))
        v = self._split(self.wv(kv_in))
        # key_mask: (b, Lk) with 1 for attendable keys -> additive (b, 1, 1, Lk)
        mask = None
        if key_mask is not None:
            mask = (1.0 - np.asarray(key_mask, dtype=q_in.data.dtype))[:, None, None, :] * ad.MASK_VALUE
        out = ad.attention(q, k, v, mask)
        out = ad.reshape(ad.transpose(out, (0, 2, 1, 3)), (b, n, d))
        return self.wo(out)


class FeedForward(Module):
    def __init__(self, dim: int, hidden: int, rng: np.random.Generator, dtype=np.float32):
        self.fc1 = Linear(dim, hidden, rng, dtype)
        self.fc2 = Linear(hidden, dim, rng, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(ad.gelu(self.fc1(x)))


class EncoderLayer(Module):
    """Pre-LN self-attention + feed-forward residual block."""

    def __init__(self, dim: int, heads: int, ffn_ratio: int, rng: np.random.Generator, dtype=np.float32):
        self.ln_attn = LayerNorm(dim, dtype)
        self.attn = MultiHeadAttention(dim, heads, rng, dtype)
        self.ln_ffn = LayerNorm(dim, dtype)
        self.ffn = FeedForward(dim, dim * ffn_ratio, rng, dtype)

    def __call__(self, x: Tensor, key_mask: np.ndarray | None = None) -> Tensor:
        h = self.ln_attn(x)
        x = ad.add(x, self.attn(h, h, key_mask))
        x = ad.add(x, self.ffn(self.ln_ffn(x)))
        return x


class CrossEncoderLayer(Module):
    """Pre-LN block: self-attention over queries, cross-attention to a
    fixed key/value sequence, then feed-forward."""

    def __init__(self, dim: int, heads: int, ffn_ratio: int, rng: np.random.Generator, dtype=np.float32):
        self.ln_self = LayerNorm(dim, dtype)
        self.self_attn = MultiHeadAttention(dim, heads, rng, dtype)
        self.ln_cross = LayerNorm(dim, dtype)
        self.cross_attn = MultiHeadAttention(dim, heads, rng, dtype)
        self.ln_ffn = LayerNorm(dim, dtype)
        self.ffn = FeedForward(dim, dim * ffn_ratio, rng, dtype)

    def __call__(self, x: Tensor, kv: Tensor,
                 self_mask: np.ndarray | None = None,
                 cross_mask: np.ndarray | None = None) -> Tensor:
        h = self.ln_self(x)
        x = ad.add(x, self.self_attn(h, h, self_mask))
        x = ad.add(x, self.cross_attn(self.ln_cross(x), kv, cross_mask))
        x = ad.add(x, self.ffn(self.ln_ffn(x)))
        return x
