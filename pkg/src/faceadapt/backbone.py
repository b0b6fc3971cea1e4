"""Miniature latent-diffusion U-Net hosting the face adapters.

Each transformer block runs self-attention, then the gated face adapter,
then cross-attention to the text tokens, then a feed-forward layer. Only
the adapters, the identity projector and the null identity are trainable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .adapter import GatedSelfAttention, IncrementRecord, apply_adapter
from .attention import FeedForward, MultiHeadAttention
from .config import TrainConfig, UNetConfig
from .encoder import IdentityProjector, build_encoder
from .errors import InvalidInputError, NumericError


# --- noise process ----------------------------------------------------------


class NoiseSchedule:
    """Linear-beta DDPM schedule."""

    def __init__(self, n_timesteps=100, beta_start=1e-3, beta_end=0.2):
        self.n_timesteps = n_timesteps
        self.betas = np.linspace(beta_start, beta_end, n_timesteps, dtype=np.float64)
        self.alphas_cumprod = np.cumprod(1.0 - self.betas)

    @classmethod
    def from_config(cls, cfg: UNetConfig):
        return cls(cfg.n_timesteps, cfg.beta_start, cfg.beta_end)

    def check_timestep(self, t):
        t = np.asarray(t)
        if np.any(t < 0) or np.any(t >= self.n_timesteps):
            raise InvalidInputError(f"timestep out of range [0, {self.n_timesteps}): {t}")

    def respaced(self, steps):
        """Timesteps and per-step (abar_t, abar_prev) for a ``steps``-long reverse chain."""
        if steps < 1:
            raise InvalidInputError("steps must be >= 1")
        steps = min(steps, self.n_timesteps)
        ts = np.unique(np.round(np.linspace(self.n_timesteps - 1, 0, steps)).astype(int))[::-1]
        abar = self.alphas_cumprod[ts]
        abar_prev = np.append(abar[1:], 1.0)
        return ts, abar, abar_prev


def add_noise(z0, t, eps, schedule: NoiseSchedule, alphas_cumprod=None):
    """z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps.

    ``alphas_cumprod`` overrides the schedule lookup (a scalar or per-sample values).
    """
    if eps.shape != z0.shape:
        raise InvalidInputError(f"noise shape {tuple(eps.shape)} != latent {tuple(z0.shape)}")
    if alphas_cumprod is None:
        schedule.check_timestep(t)
        alphas_cumprod = schedule.alphas_cumprod[np.asarray(t)]
    abar = torch.as_tensor(np.asarray(alphas_cumprod), dtype=z0.dtype)
    abar = abar.reshape(abar.shape + (1,) * (z0.dim() - abar.dim()))
    return abar.sqrt() * z0 + (1 - abar).sqrt() * eps


# --- toy latent space -------------------------------------------------------

# orthonormal columns: RGB (centred) -> 4 latent channels; decode is the transpose
_CODEC = torch.tensor(
    [[0.5, 0.5, 0.5], [0.5, -0.5, 0.5], [0.5, 0.5, -0.5], [0.5, -0.5, -0.5]], dtype=torch.float64
)


def encode_latent(pixels, grid=8):
    """(..., H, W, 3) in [0, 1] -> (..., 4, grid, grid) by area pooling and a fixed linear map."""
    x = torch.as_tensor(np.asarray(pixels), dtype=torch.float64)
    lead = x.shape[:-3]
    x = x.reshape(-1, *x.shape[-3:]).permute(0, 3, 1, 2)
    x = F.adaptive_avg_pool2d(x, grid) * 2 - 1
    z = torch.einsum("lc,bchw->blhw", _CODEC, x)
    return z.reshape(*lead, 4, grid, grid)


def decode_latent(z, image_size=64):
    """Inverse of :func:`encode_latent` up to pooling; returns (..., H, W, 3) in [0, 1]."""
    z = torch.as_tensor(z, dtype=torch.float64)
    lead = z.shape[:-3]
    z = z.reshape(-1, *z.shape[-3:])
    x = torch.einsum("lc,blhw->bchw", _CODEC, z)
    x = F.interpolate((x + 1) / 2, size=image_size, mode="nearest").clamp(0, 1)
    return x.permute(0, 2, 3, 1).reshape(*lead, image_size, image_size, 3).numpy()


# --- U-Net ------------------------------------------------------------------


def timestep_embedding(t, dim):
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


class ResBlock(nn.Module):
    def __init__(self, in_ch, out_ch, temb_dim, groups=8):
        super().__init__()
        # narrow test models fall back to fewer groups
        self.norm1 = nn.GroupNorm(math.gcd(groups, in_ch), in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.temb = nn.Linear(temb_dim, out_ch)
        self.norm2 = nn.GroupNorm(math.gcd(groups, out_ch), out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class UNetTransformerBlock(nn.Module):
    def __init__(self, index, d_model, heads, with_gsa=True):
        super().__init__()
        self.index = index
        self.norm1 = nn.LayerNorm(d_model)
        self.self_attn = MultiHeadAttention(d_model, heads)
        self.gsa = GatedSelfAttention(d_model, heads) if with_gsa else None
        self.norm2 = nn.LayerNorm(d_model)
        self.cross_attn = MultiHeadAttention(d_model, heads)
        self.norm3 = nn.LayerNorm(d_model)
        self.ff = FeedForward(d_model)

    def forward(self, h, text, e_id, alpha, id_gate, records):
        b, c, hh, ww = h.shape
        x = h.flatten(2).transpose(1, 2)
        x = x + self.self_attn(self.norm1(x))
        if self.gsa is not None and e_id is not None:
            rec = self.gsa(x, e_id, self.index)
            if id_gate is not None:
                rec.increment = rec.increment * id_gate[:, None, None]
            records.append(rec)
            x = apply_adapter(x, rec, alpha)
        x = x + self.cross_attn(self.norm2(x), text)
        x = x + self.ff(self.norm3(x))
        if not torch.isfinite(x).all():
            raise NumericError(f"non-finite activations in block {self.index}", block_index=self.index)
        return x.transpose(1, 2).reshape(b, c, hh, ww)


@dataclass(frozen=True)
class BlockSpec:
    index: int
    stage: str
    level: int
    grid: tuple


def block_layout(cfg: UNetConfig) -> list[BlockSpec]:
    _, h, w = cfg.latent_shape
    specs = []
    grid = lambda lvl: (h >> lvl, w >> lvl)
    for lvl in range(cfg.levels):
        specs += [BlockSpec(0, "down", lvl, grid(lvl))] * cfg.down_blocks[lvl]
    specs += [BlockSpec(0, "mid", cfg.levels - 1, grid(cfg.levels - 1))] * cfg.mid_blocks
    for lvl in reversed(range(cfg.levels)):
        specs += [BlockSpec(0, "up", lvl, grid(lvl))] * cfg.up_blocks[lvl]
    return [BlockSpec(i, s.stage, s.level, s.grid) for i, s in enumerate(specs)]


class MiniUNet(nn.Module):
    def __init__(self, cfg: UNetConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.d_model
        c_lat = cfg.latent_shape[0]
        self.layout = block_layout(cfg)
        gsa = set(range(len(self.layout))) if cfg.gsa_blocks is None else set(cfg.gsa_blocks)
        blocks = iter(
            UNetTransformerBlock(s.index, d, cfg.heads, s.index in gsa) for s in self.layout
        )
        temb = 4 * d
        self.time_mlp = nn.Sequential(nn.Linear(d, temb), nn.SiLU(), nn.Linear(temb, temb))
        self.conv_in = nn.Conv2d(c_lat, d, 3, padding=1)
        unit = lambda: nn.ModuleDict({"res": ResBlock(d, d, temb), "tb": next(blocks)})
        self.down = nn.ModuleList(
            nn.ModuleList(unit() for _ in range(n)) for n in cfg.down_blocks
        )
        self.downsample = nn.ModuleList(
            nn.Conv2d(d, d, 3, stride=2, padding=1) for _ in range(cfg.levels - 1)
        )
        self.mid_in = ResBlock(d, d, temb)
        self.mid = nn.ModuleList(unit() for _ in range(cfg.mid_blocks))
        self.mid_out = ResBlock(d, d, temb)
        up = {}
        for lvl in reversed(range(cfg.levels)):
            up[str(lvl)] = nn.ModuleList(unit() for _ in range(cfg.up_blocks[lvl]))
        self.up = nn.ModuleDict(up)
        self.merge = nn.ModuleList(ResBlock(2 * d, d, temb) for _ in range(cfg.levels))
        self.norm_out = nn.GroupNorm(math.gcd(8, d), d)
        self.conv_out = nn.Conv2d(d, c_lat, 3, padding=1)

    def transformer_blocks(self):
        units = [u for level in self.down for u in level] + list(self.mid)
        for lvl in reversed(range(self.cfg.levels)):
            units += list(self.up[str(lvl)])
        return [u["tb"] for u in units]

    def forward(self, z, t, text, e_id=None, alpha=1.0, id_gate=None):
        records: list[IncrementRecord] = []
        temb = self.time_mlp(timestep_embedding(t, self.cfg.d_model).to(z.dtype))

        def run(units, h):
            for u in units:
                h = u["res"](h, temb)
                h = u["tb"](h, text, e_id, alpha, id_gate, records)
            return h

        h = self.conv_in(z)
        skips = []
        for lvl in range(self.cfg.levels):
            h = run(self.down[lvl], h)
            skips.append(h)
            if lvl < self.cfg.levels - 1:
                h = self.downsample[lvl](h)
        h = self.mid_out(run(self.mid, self.mid_in(h, temb)), temb)
        for lvl in reversed(range(self.cfg.levels)):
            h = self.merge[lvl](torch.cat([h, skips[lvl]], dim=1), temb)
            h = run(self.up[str(lvl)], h)
            if lvl > 0:
                h = F.interpolate(h, scale_factor=2, mode="nearest")
        out = self.conv_out(F.silu(self.norm_out(h)))
        if not torch.isfinite(out).all():
            raise NumericError("non-finite noise prediction", block_index=-1)
        return out, records


class TextEncoder(nn.Module):
    """Frozen embedding lookup: caption id -> (N_t, d_model). Id 0 is the empty prompt."""

    def __init__(self, vocab, n_tokens, d_model):
        super().__init__()
        self.n_tokens = n_tokens
        self.table = nn.Embedding(vocab, n_tokens * d_model)
        nn.init.normal_(self.table.weight)

    def forward(self, caption_ids):
        ids = torch.as_tensor(caption_ids, dtype=torch.long)
        return self.table(ids).reshape(*ids.shape, self.n_tokens, -1)


# --- full model -------------------------------------------------------------


class FaceAdapterModel(nn.Module):
    """Frozen base (U-Net, text lookup, face encoder) plus trainable identity path."""

    def __init__(self, cfg: TrainConfig):
        super().__init__()
        self.cfg = cfg
        dtype = torch.float64 if cfg.dtype == "float64" else torch.float32
        self.schedule = NoiseSchedule.from_config(cfg.unet)
        with torch.random.fork_rng():
            torch.manual_seed(cfg.unet.seed)
            self.unet = MiniUNet(cfg.unet)
            self.text_encoder = TextEncoder(
                cfg.unet.text_vocab, cfg.unet.n_text_tokens, cfg.unet.d_model
            )
            self.face_encoder = build_encoder(cfg.encoder)
            self.projector = IdentityProjector(
                cfg.encoder.embed_dim,
                cfg.encoder.n_patches + int(cfg.encoder.include_cls),
                cfg.unet.d_model,
                cfg.projection,
            )
        null = torch.zeros(cfg.projection.n_id, cfg.unet.d_model)
        if cfg.curriculum.drop_mode == "learned_null":
            self.null_identity = nn.Parameter(null)
        else:
            self.register_buffer("null_identity", null)
        self.to(dtype)
        self.requires_grad_(False)
        for p in trainable_parameters(self).values():
            p.requires_grad_(True)
        if isinstance(self.null_identity, nn.Parameter):
            self.null_identity.requires_grad_(True)

    @property
    def dtype(self):
        return self.unet.conv_in.weight.dtype

    def text(self, caption_ids):
        return self.text_encoder(caption_ids)

    def identity(self, raw_tokens):
        return self.projector(raw_tokens.to(self.dtype))

    def null_identity_embedding(self):
        """Null identity tokens, or None when dropped identities bypass the adapter."""
        if self.cfg.curriculum.drop_mode == "bypass":
            return None
        return self.null_identity

    def forward(self, z_t, t, e_text, e_id=None, alpha=1.0, id_gate=None):
        return predict_noise(self, z_t, t, e_text, e_id, alpha, id_gate)


def predict_noise(model: FaceAdapterModel, z_t, t, e_text, e_id=None, alpha=1.0, id_gate=None):
    """Noise prediction and one IncrementRecord per adapter block (none when e_id is None)."""
    squeeze = z_t.dim() == 3
    if squeeze:
        z_t = z_t[None]
    b = z_t.shape[0]
    if tuple(z_t.shape[1:]) != tuple(model.cfg.unet.latent_shape):
        raise InvalidInputError(f"latent shape {tuple(z_t.shape[1:])} != config")
    t = torch.as_tensor(np.asarray(t)).reshape(-1).expand(b)
    model.schedule.check_timestep(t.numpy())
    if e_text.dim() == 2:
        e_text = e_text.expand(b, *e_text.shape)
    if e_id is not None and e_id.dim() == 2:
        e_id = e_id.expand(b, *e_id.shape)
    pred, records = model.unet(z_t, t, e_text, e_id, alpha, id_gate)
    if squeeze:
        pred = pred[0]
        for r in records:
            r.increment, r.input_tokens = r.increment[0], r.input_tokens[0]
    return pred, records


def trainable_parameters(model: FaceAdapterModel) -> dict:
    """Adapter parameters of every block plus the identity projector, by name."""
    params = {}
    for block in model.unet.transformer_blocks():
        if block.gsa is not None:
            for name, p in block.gsa.named_parameters():
                params[f"block{block.index}.gsa.{name}"] = p
    for name, p in model.projector.named_parameters():
        params[f"projector.{name}"] = p
    return params


def optimized_parameters(model: FaceAdapterModel) -> dict:
    params = dict(trainable_parameters(model))
    if isinstance(model.null_identity, nn.Parameter):
        params["null_identity"] = model.null_identity
    return params


def block_grids(model: FaceAdapterModel) -> dict:
    return {s.index: s.grid for s in model.unet.layout}
