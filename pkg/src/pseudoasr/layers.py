"""Encoder and decoder building blocks on padded batches ``[B, T, D]``.

Conformer: half-step FF, self-attention with a learned relative-position
bias, depthwise convolution module, half-step FF, all pre-norm, final norm.
Transformer++: RMSNorm pre-norm, self-attention, SwiGLU feed-forward.
Padding frames are zeroed before every convolution so padded and unpadded
utterances see identical context.
"""

from __future__ import annotations

import math

import numpy as np

from .numcore import LayerNorm, Linear, Module, Parameter, RMSNorm, Tensor, ops

MASK_VALUE = -1e9


def frame_mask(lengths, T: int) -> np.ndarray:
    """bool ``[B, T]``: True on valid frames."""
    return np.arange(T)[None, :] < np.asarray(lengths)[:, None]


def zero_padding(x: Tensor, valid: np.ndarray) -> Tensor:
    if valid.all():
        return x
    return x * Tensor(np.broadcast_to(valid[..., None].astype(x.data.dtype), x.shape))


def sinusoidal_positions(T: int, D: int) -> np.ndarray:
    pos = np.arange(T)[:, None]
    div = np.exp(np.arange(0, D, 2) * (-math.log(10000.0) / D))
    pe = np.zeros((T, D))
    pe[:, 0::2] = np.sin(pos * div)
    pe[:, 1::2] = np.cos(pos * div)[:, : D // 2]
    return pe


class MultiHeadAttention(Module):
    def __init__(self, dim: int, heads: int, rng: np.random.Generator, max_rel: int = 0):
        if dim % heads:
            raise ValueError(f"model dim {dim} not divisible by {heads} heads")
        self.heads = heads
        self.q = Linear(dim, dim, rng)
        self.kv = Linear(dim, 2 * dim, rng)
        self.out = Linear(dim, dim, rng)
        self._max_rel = max_rel
        self.rel_bias = Parameter(np.zeros((2 * max_rel + 1, heads))) if max_rel > 0 else None

    def __call__(self, x: Tensor, key_valid: np.ndarray, memory: Tensor | None = None,
                 causal: bool = False) -> Tensor:
        B, Tq, D = x.shape
        src = x if memory is None else memory
        Tk = src.shape[1]
        H, dh = self.heads, D // self.heads
        q = self.q(x).reshape(B, Tq, H, dh).transpose(0, 2, 1, 3)
        kv = self.kv(src).reshape(B, Tk, 2, H, dh).transpose(2, 0, 3, 1, 4)
        k, v = kv[0], kv[1]
        scores = ops.matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dh))
        if self.rel_bias is not None:
            rel = np.clip(np.arange(Tk)[None, :] - np.arange(Tq)[:, None], -self._max_rel, self._max_rel)
            bias = ops.take(self.rel_bias, rel + self._max_rel).transpose(2, 0, 1)
            scores = scores + bias
        allowed = np.broadcast_to(key_valid[:, None, None, :], (B, 1, Tq, Tk))
        if causal:
            allowed = allowed & np.tril(np.ones((Tq, Tk), dtype=bool))[None, None]
        add_mask = np.where(allowed, 0.0, MASK_VALUE)
        scores = scores + Tensor(np.broadcast_to(add_mask, scores.shape))
        att = ops.softmax(scores)
        ctx = ops.matmul(att, v).transpose(0, 2, 1, 3).reshape(B, Tq, D)
        return self.out(ctx)


class FeedForward(Module):
    def __init__(self, dim: int, ff_dim: int, rng: np.random.Generator):
        self.norm = LayerNorm(dim)
        self.up = Linear(dim, ff_dim, rng)
        self.down = Linear(ff_dim, dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.down(ops.silu(self.up(self.norm(x))))


class GatedFeedForward(Module):
    """SwiGLU: ``down(silu(gate(x)) * up(x))``."""

    def __init__(self, dim: int, ff_dim: int, rng: np.random.Generator):
        self.gate = Linear(dim, ff_dim, rng, bias=False)
        self.up = Linear(dim, ff_dim, rng, bias=False)
        self.down = Linear(ff_dim, dim, rng, bias=False)

    def __call__(self, x: Tensor) -> Tensor:
        return self.down(ops.silu(self.gate(x)) * self.up(x))


class ConvModule(Module):
    def __init__(self, dim: int, kernel: int, rng: np.random.Generator):
        if kernel % 2 == 0:
            raise ValueError("depthwise kernel size must be odd")
        self.norm = LayerNorm(dim)
        self.pw1 = Linear(dim, 2 * dim, rng)
        self.dw = Parameter(rng.standard_normal((kernel, dim)) / math.sqrt(kernel))
        self.dw_b = Parameter(np.zeros(dim))
        self.dw_norm = LayerNorm(dim)
        self.pw2 = Linear(dim, dim, rng)
        self._kernel = kernel
        self._dim = dim

    def __call__(self, x: Tensor, valid: np.ndarray) -> Tensor:
        D = self._dim
        h = self.pw1(self.norm(x))
        h = h[..., :D] * ops.sigmoid(h[..., D:])
        h = zero_padding(h, valid)
        pad = (self._kernel - 1) // 2
        win = ops.unfold(h, self._kernel, 1, pad, pad)  # [B, T, K, D]
        h = (win * self.dw).sum(axis=2) + self.dw_b
        h = ops.silu(self.dw_norm(h))
        return self.pw2(h)


class ConformerBlock(Module):
    def __init__(self, dim: int, heads: int, ff_dim: int, kernel: int, max_rel: int,
                 rng: np.random.Generator):
        self.ff1 = FeedForward(dim, ff_dim, rng)
        self.att_norm = LayerNorm(dim)
        self.att = MultiHeadAttention(dim, heads, rng, max_rel=max_rel)
        self.conv = ConvModule(dim, kernel, rng)
        self.ff2 = FeedForward(dim, ff_dim, rng)
        self.out_norm = LayerNorm(dim)

    def __call__(self, x: Tensor, valid: np.ndarray) -> Tensor:
        x = x + self.ff1(x) * 0.5
        x = x + self.att(self.att_norm(x), valid)
        x = x + self.conv(x, valid)
        x = x + self.ff2(x) * 0.5
        return self.out_norm(x)


class TransformerPPBlock(Module):
    def __init__(self, dim: int, heads: int, ff_dim: int, max_rel: int, rng: np.random.Generator):
        self.att_norm = RMSNorm(dim)
        self.att = MultiHeadAttention(dim, heads, rng, max_rel=max_rel)
        self.ff_norm = RMSNorm(dim)
        self.ff = GatedFeedForward(dim, ff_dim, rng)

    def __call__(self, x: Tensor, valid: np.ndarray) -> Tensor:
        x = x + self.att(self.att_norm(x), valid)
        return x + self.ff(self.ff_norm(x))


class DecoderBlock(Module):
    def __init__(self, dim: int, heads: int, ff_dim: int, rng: np.random.Generator):
        self.self_norm = LayerNorm(dim)
        self.self_att = MultiHeadAttention(dim, heads, rng)
        self.cross_norm = LayerNorm(dim)
        self.cross_att = MultiHeadAttention(dim, heads, rng)
        self.ff = FeedForward(dim, ff_dim, rng)

    def __call__(self, y: Tensor, y_valid: np.ndarray, memory: Tensor, mem_valid: np.ndarray) -> Tensor:
        y = y + self.self_att(self.self_norm(y), y_valid, causal=True)
        y = y + self.cross_att(self.cross_norm(y), mem_valid, memory=memory)
        return y + self.ff(y)
