"""Attention primitives shared by the encoder, the projector and the U-Net."""

import math

import torch
from torch import nn


class MultiHeadAttention(nn.Module):
    """Plain softmax attention with explicit q/k/v/out maps.

    Kept explicit (no fused kernels) so tests can hand-set the maps and
    compare against a brute-force attention matrix.
    """

    def __init__(self, dim, heads=2, context_dim=None, out_bias=True):
        super().__init__()
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        context_dim = dim if context_dim is None else context_dim
        self.heads = heads
        self.head_dim = dim // heads
        self.to_q = nn.Linear(dim, dim, bias=False)
        self.to_k = nn.Linear(context_dim, dim, bias=False)
        self.to_v = nn.Linear(context_dim, dim, bias=False)
        self.to_out = nn.Linear(dim, dim, bias=out_bias)

    def attention_weights(self, x, context=None):
        context = x if context is None else context
        q = self._split(self.to_q(x))
        k = self._split(self.to_k(context))
        sim = q @ k.transpose(-1, -2) / math.sqrt(self.head_dim)
        return sim.softmax(dim=-1)

    def forward(self, x, context=None):
        context = x if context is None else context
        attn = self.attention_weights(x, context)
        v = self._split(self.to_v(context))
        out = attn @ v
        out = out.transpose(-3, -2).reshape(*x.shape[:-1], -1)
        return self.to_out(out)

    def _split(self, t):
        # (..., n, h*d) -> (..., h, n, d)
        t = t.reshape(*t.shape[:-1], self.heads, self.head_dim)
        return t.transpose(-3, -2)


class FeedForward(nn.Sequential):
    def __init__(self, dim, mult=4):
        super().__init__(
            nn.Linear(dim, dim * mult),
            nn.GELU(),
            nn.Linear(dim * mult, dim),
        )


class TransformerBlock(nn.Module):
    """Pre-norm self-attention + feed-forward block."""

    def __init__(self, dim, heads=2, ff_mult=4):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.ff = FeedForward(dim, ff_mult)

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.ff(self.norm2(x))
