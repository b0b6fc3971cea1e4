"""Training objective: masked diffusion loss plus the face-adapting increment penalty.

The increment penalty of one adapter block is

    ||GSA(x) * (1 - M_x)|| / ||x * (1 - M_x)||

with M_x the face mask pooled to that block's token grid, i.e. the relative
change the adapter makes to the tokens outside the face.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch

from .adapter import IncrementRecord
from .backbone import add_noise, block_grids, predict_noise
from .config import LossWeights
from .errors import InvalidConfigError, InvalidInputError, NumericError


def downsample_mask(base, grid):
    """Area-average pool a (..., H, W) mask onto ``grid``; soft values in [0, 1]."""
    base = torch.as_tensor(np.asarray(base) if not torch.is_tensor(base) else base)
    h, w = grid
    H, W = base.shape[-2:]
    if h > H or w > W or H % h or W % w:
        raise InvalidConfigError(f"grid {grid} does not evenly divide mask shape {(H, W)}")
    cells = base.to(torch.float64).reshape(*base.shape[:-2], h, H // h, w, W // w)
    return cells.mean(dim=(-3, -1))


@dataclass
class MaskPyramid:
    base: torch.Tensor  # (..., H, W)
    per_block: dict = field(default_factory=dict)  # block index -> (..., h, w)
    latent: Optional[torch.Tensor] = None


def build_mask_pyramid(base, grids: dict, latent_grid) -> MaskPyramid:
    base = torch.as_tensor(np.asarray(base))
    cache = {}
    per_block = {}
    for idx, grid in grids.items():
        if grid not in cache:
            cache[grid] = downsample_mask(base, grid)
        per_block[idx] = cache[grid]
    return MaskPyramid(base, per_block, downsample_mask(base, latent_grid))


def fair_loss(rec: IncrementRecord, m_x, eps_den=1e-8):
    """Relative increment magnitude outside the face; per-sample when batched.

    Defined as exactly 0 when the mask covers every token. ``eps_den`` floors
    the denominator, so the ratio is exactly scale-free whenever the
    non-face tokens have norm above it.
    """
    inc, x = rec.increment, rec.input_tokens
    if not (torch.isfinite(inc).all() and torch.isfinite(x).all()):
        raise NumericError("non-finite increment or input", block_index=rec.block_index)
    m = torch.as_tensor(m_x, dtype=inc.dtype)
    # (..., h, w) -> (..., N_x, 1); broadcast over channels
    outside = (1 - m).reshape(*m.shape[:-2], -1, 1)
    if outside.shape[-2] != inc.shape[-2]:
        raise InvalidInputError(f"mask has {outside.shape[-2]} cells, tokens {inc.shape[-2]}")
    has_outside = (outside > 0).flatten(-2).any(dim=-1)
    outside = torch.where(has_outside[..., None, None], outside, torch.ones_like(outside))
    num = _l2(inc * outside)
    den = _l2(x * outside).clamp_min(eps_den)
    return torch.where(has_outside, num / den, torch.zeros_like(num))


def _l2(t):
    # sqrt with a zero-safe backward
    sq = t.pow(2).flatten(-2).sum(dim=-1)
    safe = torch.where(sq > 0, sq, torch.ones_like(sq))
    return torch.where(sq > 0, safe.sqrt(), torch.zeros_like(sq))


def random_face_mask(base_mask, p, rng):
    """Face mask with probability ``p``, else all ones; one draw per sample.

    ``base_mask`` is (H, W) or (B, H, W); returns (mask, used_face flags).
    """
    base = np.asarray(base_mask)
    batched = base.ndim == 3
    masks = base if batched else base[None]
    used = rng.random(len(masks)) < p
    out = np.where(used[:, None, None], masks, np.ones_like(masks))
    return (out, used) if batched else (out[0], bool(used[0]))


def masked_diffusion_loss(pred, eps, m, norm="masked_mean"):
    """Noise-prediction error restricted to the mask ``m`` (broadcast over channels).

    ``masked_mean``: weighted mean of squared error over masked elements.
    ``l2``: the plain L2 norm of the masked error.
    """
    if pred.shape != eps.shape:
        raise InvalidInputError(f"prediction {tuple(pred.shape)} != noise {tuple(eps.shape)}")
    m = torch.as_tensor(m, dtype=pred.dtype)
    if m.dim() == pred.dim() - 1:
        m = m.unsqueeze(-3)
    err = pred - eps
    dims = (-3, -2, -1)
    if norm == "l2":
        per_sample = _l2((err * m).flatten(-3).unsqueeze(-1))
    elif norm == "masked_mean":
        weight = (m.expand_as(err)).sum(dim=dims)
        total = (m * err.pow(2)).sum(dim=dims)
        per_sample = torch.where(weight > 0, total / weight.clamp_min(1e-300), torch.zeros_like(total))
    else:
        raise InvalidConfigError(f"unknown diffusion norm {norm!r}")
    return per_sample.mean()


@dataclass
class TrainBatch:
    z0: torch.Tensor  # (B, C, h, w)
    t: np.ndarray  # (B,)
    eps: torch.Tensor
    text: torch.Tensor  # (B, N_t, d)
    e_id: Optional[torch.Tensor]  # (B, N_id, d) or None
    face_masks: np.ndarray  # (B, H, W) base masks of the target images
    id_gate: Optional[torch.Tensor] = None  # per-sample 0/1 adapter switch
    use_face_mask: Optional[np.ndarray] = None  # M_r(p) decisions; drawn if None


def total_loss(batch: TrainBatch, model, weights: LossWeights, rng=None, alpha=1.0):
    """Masked diffusion loss + lambda * sum of per-block increment penalties."""
    z_t = add_noise(batch.z0, batch.t, batch.eps, model.schedule)
    pred, records = predict_noise(model, z_t, batch.t, batch.text, batch.e_id, alpha, batch.id_gate)
    pyramid = build_mask_pyramid(batch.face_masks, block_grids(model), z_t.shape[-2:])
    used = batch.use_face_mask
    if used is None:
        used = rng.random(len(batch.face_masks)) < weights.mask_prob
    used_t = torch.as_tensor(np.asarray(used))[:, None, None]
    m_r = torch.where(used_t, pyramid.latent, torch.ones_like(pyramid.latent))
    loss_diff = masked_diffusion_loss(pred, batch.eps, m_r, weights.diffusion_norm)
    fair_set = None if weights.fair_blocks is None else set(weights.fair_blocks)
    fair_per_block = {}
    loss_fair = pred.new_zeros(())
    for rec in records:
        if fair_set is not None and rec.block_index not in fair_set:
            continue
        value = fair_loss(rec, pyramid.per_block[rec.block_index], weights.eps_den).mean()
        fair_per_block[rec.block_index] = value
        loss_fair = loss_fair + value
    total = loss_diff + weights.lambda_fair * loss_fair
    diagnostics = {
        "loss_total": total.item(),
        "loss_diff": loss_diff.item(),
        "loss_fair": loss_fair.item(),
        "fair_per_block": {k: v.item() for k, v in fair_per_block.items()},
    }
    return total, diagnostics
