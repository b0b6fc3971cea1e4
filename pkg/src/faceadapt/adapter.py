"""Sequential face adapter with gated self-attention.

    x <- x + alpha * GSA(x)
    GSA(x) = tanh(gamma) * TS(SelfAttn([x, e_id]))

TS keeps the visual rows of the attention output; the visual tokens are the
prefix of the concatenation.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .attention import MultiHeadAttention
from .errors import InvalidInputError


@dataclass
class IncrementRecord:
    block_index: int
    increment: torch.Tensor  # GSA(x), (..., N_x, d)
    input_tokens: torch.Tensor  # x before the residual add


def token_select(concat: torch.Tensor, n_visual: int) -> torch.Tensor:
    if n_visual > concat.shape[-2] or n_visual < 0:
        raise InvalidInputError(
            f"n_visual={n_visual} exceeds sequence length {concat.shape[-2]}"
        )
    return concat[..., :n_visual, :]


class GatedSelfAttention(nn.Module):
    def __init__(self, d_model, heads=2):
        super().__init__()
        self.norm = nn.LayerNorm(d_model)
        self.attn = MultiHeadAttention(d_model, heads)
        self.gamma = nn.Parameter(torch.zeros(()))

    def ungated(self, x, e_id):
        """TS(SelfAttn(LN([x, e_id]))) without the gate."""
        if x.shape[-1] != e_id.shape[-1]:
            raise InvalidInputError(
                f"visual width {x.shape[-1]} != identity width {e_id.shape[-1]}"
            )
        if e_id.dim() < x.dim():
            e_id = e_id.expand(*x.shape[:-2], *e_id.shape[-2:])
        seq = self.norm(torch.cat([x, e_id], dim=-2))
        return token_select(self.attn(seq), x.shape[-2])

    def forward(self, x, e_id, block_index=0) -> IncrementRecord:
        increment = torch.tanh(self.gamma) * self.ungated(x, e_id)
        return IncrementRecord(block_index, increment, x)


def gated_self_attention(x, e_id, params: GatedSelfAttention, block_index=0) -> IncrementRecord:
    return params(x, e_id, block_index)


def apply_adapter(x, rec: IncrementRecord, alpha: float) -> torch.Tensor:
    if rec.increment.shape != x.shape:
        raise InvalidInputError(
            f"increment shape {tuple(rec.increment.shape)} != tokens {tuple(x.shape)}"
        )
    return x + alpha * rec.increment
