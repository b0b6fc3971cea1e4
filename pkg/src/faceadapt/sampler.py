"""Guided sampling, inpainting and the per-block increment profiler."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
import torch

from .backbone import predict_noise
from .config import SamplerConfig
from .errors import InvalidInputError, NumericError
from .objective import downsample_mask


def cfg_combine(cond, uncond, cfg_scale):
    """(1 + s) * cond - s * uncond, evaluated as cond + s * (cond - uncond)."""
    if cond.shape != uncond.shape:
        raise InvalidInputError(f"branch shapes differ: {tuple(cond.shape)} vs {tuple(uncond.shape)}")
    return cond + cfg_scale * (cond - uncond)


def _batch(t, b):
    if t is None:
        return None
    return t.expand(b, *t.shape) if t.dim() == 2 else t


def _reverse_step(z, eps, abar, abar_prev, noise, clip_x0=None):
    """One ancestral DDPM step from abar to abar_prev given a noise estimate."""
    x0 = (z - (1 - abar) ** 0.5 * eps) / abar**0.5
    if clip_x0 is not None:
        x0 = x0.clamp(-clip_x0, clip_x0)
    alpha = abar / abar_prev
    beta = 1 - alpha
    coef_x0 = abar_prev**0.5 * beta / (1 - abar)
    coef_z = alpha**0.5 * (1 - abar_prev) / (1 - abar)
    mean = coef_x0 * x0 + coef_z * z
    if noise is None:
        return mean
    var = beta * (1 - abar_prev) / (1 - abar)
    return mean + var**0.5 * noise


def _sample(model, e_text, e_id, cfg: SamplerConfig, neg_text=None, batch=None,
            template=None, mask=None, on_step=None):
    dtype = model.dtype
    e_text = torch.as_tensor(e_text).to(dtype)
    b = batch or (e_text.shape[0] if e_text.dim() == 3 else 1)
    e_text = _batch(e_text, b)
    if neg_text is None:
        neg_text = model.text(torch.full((b,), cfg.neg_text))
    neg_text = _batch(neg_text.to(dtype), b)
    e_id = _batch(e_id, b)
    null_id = None if e_id is None else _batch(model.null_identity_embedding(), b)
    gen = torch.Generator().manual_seed(cfg.seed)
    # separate stream so the masked region sees exactly the generate() noise
    template_gen = torch.Generator().manual_seed(cfg.seed + 1)
    shape = (b, *model.cfg.unet.latent_shape)
    ts, abars, abar_prevs = model.schedule.respaced(cfg.steps)

    def noised_template(abar):
        if abar >= 1.0:
            return template
        n = torch.randn(shape, generator=template_gen, dtype=dtype)
        return abar**0.5 * template + (1 - abar) ** 0.5 * n

    z = torch.randn(shape, generator=gen, dtype=dtype)
    if template is not None:
        z = torch.where(mask > 0, z * mask + noised_template(abars[0]) * (1 - mask),
                        noised_template(abars[0]))
    with torch.no_grad():
        for i, (t, abar, abar_prev) in enumerate(zip(ts, abars, abar_prevs)):
            eps_c, recs = predict_noise(model, z, int(t), e_text, e_id, cfg.alpha)
            if on_step is not None:
                on_step(i, int(t), recs)
            noise = torch.randn(shape, generator=gen, dtype=dtype) if i < len(ts) - 1 else None
            if cfg.cfg_scale == 0:
                z_next = _reverse_step(z, eps_c, abar, abar_prev, noise, cfg.clip_x0)
            else:
                eps_u, _ = predict_noise(model, z, int(t), neg_text, null_id, cfg.alpha)
                if cfg.space == "epsilon":
                    eps = cfg_combine(eps_c, eps_u, cfg.cfg_scale)
                    z_next = _reverse_step(z, eps, abar, abar_prev, noise, cfg.clip_x0)
                else:
                    z_next = cfg_combine(
                        _reverse_step(z, eps_c, abar, abar_prev, noise, cfg.clip_x0),
                        _reverse_step(z, eps_u, abar, abar_prev, noise, cfg.clip_x0),
                        cfg.cfg_scale,
                    )
            if not torch.isfinite(z_next).all():
                raise NumericError(f"sampler diverged at step {i} (t={int(t)})", step=i)
            if template is not None:
                nt = noised_template(abar_prev)
                z_next = torch.where(mask > 0, z_next * mask + nt * (1 - mask), nt)
            z = z_next
    return z


def generate(e_text, e_id, cfg: SamplerConfig, model, neg_text=None, on_step=None):
    """Guided ancestral sampling; the unconditional branch uses ``neg_text`` and the null identity.

    ``e_id`` None gives plain text-to-image sampling with the adapters bypassed.
    """
    return _sample(model, e_text, e_id, cfg, neg_text=neg_text, on_step=on_step)


def inpaint(template_latent, face_mask, e_text, e_id, cfg: SamplerConfig, model, neg_text=None,
            on_step=None):
    """Regenerate the masked region of ``template_latent``; everything outside is kept exactly.

    ``face_mask`` may be at image resolution; it is area-pooled to the latent grid.
    """
    template = torch.as_tensor(template_latent).to(model.dtype)
    squeeze = template.dim() == 3
    if squeeze:
        template = template[None]
    grid = tuple(template.shape[-2:])
    m = downsample_mask(face_mask, grid).to(model.dtype)
    if m.dim() == 2:
        m = m.expand(template.shape[0], *grid)
    m = m[:, None]
    out = _sample(model, e_text, e_id, cfg, neg_text=neg_text, batch=template.shape[0],
                  template=template, mask=m, on_step=on_step)
    return out[0] if squeeze else out


@dataclass
class IncrementProfile:
    per_block: dict  # block index -> (B, h, w) array in [0, 1]

    def to_json(self) -> str:
        return json.dumps({str(k): np.asarray(v).tolist() for k, v in self.per_block.items()})

    @classmethod
    def from_json(cls, text) -> "IncrementProfile":
        return cls({int(k): np.asarray(v) for k, v in json.loads(text).items()})


def increment_profile(e_text, e_id, cfg: SamplerConfig, model, neg_text=None, template=None,
                      face_mask=None) -> IncrementProfile:
    """Per-token adapter increment norm, averaged over sampling steps, max-normalised per block."""
    return profiled_sample(e_text, e_id, cfg, model, neg_text, template, face_mask)[1]


def profiled_sample(e_text, e_id, cfg: SamplerConfig, model, neg_text=None, template=None,
                    face_mask=None):
    """Run generation (or inpainting with ``template``) and return (latent, IncrementProfile)."""
    grids = {s.index: s.grid for s in model.unet.layout}
    sums: dict = {}
    count = [0]

    def collect(i, t, records):
        count[0] += 1
        for rec in records:
            inc = rec.increment
            norms = inc.norm(dim=-1).reshape(inc.shape[0], *grids[rec.block_index])
            sums[rec.block_index] = sums.get(rec.block_index, 0) + norms.to(torch.float64)

    if template is not None:
        z = inpaint(template, face_mask, e_text, e_id, cfg, model, neg_text, on_step=collect)
    else:
        z = generate(e_text, e_id, cfg, model, neg_text, on_step=collect)
    per_block = {}
    for idx, total in sorted(sums.items()):
        mean = (total / count[0]).numpy()
        peak = mean.reshape(len(mean), -1).max(axis=1).reshape(-1, 1, 1)
        per_block[idx] = np.divide(mean, peak, out=np.zeros_like(mean), where=peak > 0)
    return z, IncrementProfile(per_block)
