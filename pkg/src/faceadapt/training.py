"""Adapter training loop with checkpointing and exact resume.

Every random draw of training step ``s`` comes from generators seeded by
``(seed, s)`` and ``(seed, s, sample)``, so the RNG state at a step boundary
is just the step counter and resuming reproduces an uninterrupted run.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .backbone import FaceAdapterModel, encode_latent, optimized_parameters
from .checkpoint import load_checkpoint, save_checkpoint, tensor_digest
from .config import TrainConfig, config_hash, to_dict
from .curriculum import (
    Case,
    IdentityDataset,
    Record,
    generate_synthetic_identity_dataset,
    sample_condition,
    sample_text_drop,
)
from .encoder import mask_face_region, FaceImage
from .errors import CheckpointError, NumericError
from .objective import TrainBatch, masked_diffusion_loss, total_loss
from .backbone import add_noise, predict_noise

log = logging.getLogger(__name__)


def make_dataset(cfg: TrainConfig):
    d = cfg.dataset
    return generate_synthetic_identity_dataset(d.n_identities, d.n_per_identity, d.image_size, d.seed)


def make_optimizer(model, cfg: TrainConfig):
    o = cfg.optimizer
    return torch.optim.Adam(
        list(optimized_parameters(model).values()), lr=o.lr, betas=(o.beta1, o.beta2), eps=o.eps
    )


def frozen_digest(model) -> str:
    trainable = {id(p) for p in optimized_parameters(model).values()}
    return tensor_digest(
        {n: p for n, p in model.state_dict(keep_vars=True).items() if id(p) not in trainable}
    )


@dataclass
class DataCache:
    """Frozen-encoder outputs and latents, computed once per dataset."""

    dataset: object
    raw_tokens: torch.Tensor  # (N, N_f, d_f)
    latents: torch.Tensor  # (N, C, h, w)
    masks: np.ndarray  # (N, H, W)

    @classmethod
    def build(cls, dataset, model):
        masked = np.stack(
            [mask_face_region(FaceImage(r.image, r.face_mask)).pixels for r in dataset.records]
        )
        raw = model.face_encoder.encode(torch.as_tensor(masked, dtype=model.dtype))
        latents = encode_latent(dataset.images, model.cfg.unet.latent_shape[-1]).to(model.dtype)
        return cls(dataset, raw, latents, dataset.masks.astype(np.float64))


def build_batch(step, model, cache: DataCache, cfg: TrainConfig, plans_out=None) -> TrainBatch:
    n = len(cache.dataset)
    b = min(cfg.optimizer.batch_size, n)
    picks = np.random.default_rng([cfg.seed, step]).choice(n, size=b, replace=False)
    sources, dropped, captions, ts, eps, use_mask = [], [], [], [], [], []
    shape = tuple(cfg.unet.latent_shape)
    for j, rec in enumerate(picks):
        rng = np.random.default_rng([cfg.seed, step, j])
        plan = sample_condition(int(rec), step, cfg.curriculum, rng, cache.dataset)
        if plans_out is not None:
            plans_out.append(plan)
        text_drop = sample_text_drop(cfg.curriculum, rng)
        dropped.append(plan.case == Case.DROPPED)
        sources.append(rec if plan.source_record is None else plan.source_record)
        captions.append(0 if text_drop else cache.dataset.records[rec].caption_id)
        ts.append(rng.integers(cfg.unet.n_timesteps))
        eps.append(rng.standard_normal(shape))
        use_mask.append(rng.random() < cfg.loss.mask_prob)
    dropped = torch.tensor(dropped)
    e_id = model.identity(cache.raw_tokens[sources])
    id_gate = None
    null = model.null_identity_embedding()
    if null is None:
        id_gate = (~dropped).to(model.dtype)
    else:
        e_id = torch.where(dropped[:, None, None], null.expand_as(e_id), e_id)
    return TrainBatch(
        z0=cache.latents[picks],
        t=np.array(ts),
        eps=torch.as_tensor(np.stack(eps), dtype=model.dtype),
        text=model.text(torch.tensor(captions)).to(model.dtype),
        e_id=e_id,
        face_masks=cache.masks[picks],
        id_gate=id_gate,
        use_face_mask=np.array(use_mask),
    )


def base_parameters(model) -> dict:
    adapter = {id(p) for p in optimized_parameters(model).values()}
    return {n: p for n, p in model.unet.named_parameters() if id(p) not in adapter}


def faceless(dataset):
    """Copy of ``dataset`` with every face region painted neutral grey."""
    records = []
    for r in dataset.records:
        image = r.image.copy()
        image[r.face_mask > 0] = 0.5
        records.append(Record(image, r.face_mask, r.identity_id, r.caption_id))
    return IdentityDataset(records)


# the most recent pretrained base, keyed by everything that determines it
_BASE_CACHE: dict = {}


def _base_key(cfg: TrainConfig) -> str:
    d = to_dict(cfg)
    relevant = {k: d[k] for k in ("unet", "dataset", "dtype")}
    relevant["text_drop"] = cfg.curriculum.text_drop_prob
    return json.dumps(relevant, sort_keys=True, default=list)


def pretrain_base(model, dataset, cfg: TrainConfig) -> list:
    """Fit the U-Net as a text-conditioned denoiser with the adapters bypassed, then refreeze it.

    Plays the role of the pretrained base model. Uses ``dataset`` (or its faceless copy, per
    ``unet.pretrain_data``) and returns the loss curve. Results are memoised per configuration
    so ablation variants that share a base train it once.
    """
    u = cfg.unet
    params = base_parameters(model)
    key = _base_key(cfg)
    if key in _BASE_CACHE:
        state, curve = _BASE_CACHE[key]
        with torch.no_grad():
            for name, p in params.items():
                p.copy_(state[name])
        return list(curve)
    if u.pretrain_data == "faceless":
        dataset = faceless(dataset)
    latents = encode_latent(dataset.images, u.latent_shape[-1]).to(model.dtype)
    captions_all = dataset.caption_ids
    for p in params.values():
        p.requires_grad_(True)
    opt = torch.optim.Adam(list(params.values()), lr=u.pretrain_lr)
    n = len(dataset)
    b = min(u.pretrain_batch, n)
    curve = []
    for step in range(u.pretrain_steps):
        rng = np.random.default_rng([u.seed, 0xBA5E, step])
        picks = rng.choice(n, size=b, replace=False)
        captions = captions_all[picks].copy()
        captions[rng.random(b) < cfg.curriculum.text_drop_prob] = 0
        t = rng.integers(u.n_timesteps, size=b)
        eps = torch.as_tensor(rng.standard_normal((b, *u.latent_shape)), dtype=model.dtype)
        z_t = add_noise(latents[picks], t, eps, model.schedule)
        pred, _ = predict_noise(model, z_t, t, model.text(torch.as_tensor(captions)), None)
        loss = (pred - eps).pow(2).mean()
        if not torch.isfinite(loss):
            raise NumericError(f"non-finite loss at base pretraining step {step}", step=step)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        curve.append(loss.item())
    for p in params.values():
        p.requires_grad_(False)
        p.grad = None
    _BASE_CACHE.clear()
    _BASE_CACHE[key] = ({n: p.detach().clone() for n, p in params.items()}, list(curve))
    return curve


def probe_loss(model, cache: DataCache, cfg: TrainConfig) -> float:
    """Plain noise-prediction MSE on a fixed, paired-condition probe set."""
    rng = np.random.default_rng([cfg.seed, 2**31 - 1])
    n = len(cache.dataset)
    size = min(cfg.probe_size, n)
    picks = rng.choice(n, size=size, replace=False)
    t = np.linspace(0, cfg.unet.n_timesteps - 1, size).round().astype(int)
    eps = torch.as_tensor(rng.standard_normal((size, *cfg.unet.latent_shape)), dtype=model.dtype)
    captions = torch.as_tensor(cache.dataset.caption_ids[picks])
    with torch.no_grad():
        z_t = add_noise(cache.latents[picks], t, eps, model.schedule)
        e_id = model.identity(cache.raw_tokens[picks])
        pred, _ = predict_noise(model, z_t, t, model.text(captions), e_id, cfg.train_alpha)
    return float(masked_diffusion_loss(pred, eps, torch.ones(size, *cfg.unet.latent_shape[1:])))


@dataclass
class TrainResult:
    model: FaceAdapterModel
    step: int
    checkpoint: Optional[Path]
    diagnostics: list = field(default_factory=list)
    probe: dict = field(default_factory=dict)  # step -> probe loss


class Trainer:
    def __init__(self, cfg: TrainConfig, out_dir=None, dataset=None, model=None, optimizer=None,
                 start_step=0):
        self.cfg = cfg
        self.out_dir = None if out_dir is None else Path(out_dir)
        self.model = FaceAdapterModel(cfg) if model is None else model
        self.optimizer = make_optimizer(self.model, cfg) if optimizer is None else optimizer
        self.dataset = make_dataset(cfg) if dataset is None else dataset
        self.cache = DataCache.build(self.dataset, self.model)
        self.step = start_step
        self.diagnostics: list = []
        self.probe: dict = {}
        self.last_checkpoint: Optional[Path] = None

    def checkpoint(self):
        if self.out_dir is None:
            return None
        path = self.out_dir / f"step_{self.step:06d}"
        save_checkpoint(path, self.model, self.step, self.optimizer,
                        extra={"probe_loss": self.probe.get(self.step)})
        (self.out_dir / "latest").write_text(path.name)
        self.last_checkpoint = path
        return path

    def _emit(self, record):
        self.diagnostics.append(record)
        if self.out_dir is not None:
            with open(self.out_dir / "diagnostics.jsonl", "a") as fh:
                fh.write(json.dumps(record) + "\n")

    def train_step(self):
        batch = build_batch(self.step, self.model, self.cache, self.cfg)
        self.optimizer.zero_grad(set_to_none=True)
        loss, diag = total_loss(batch, self.model, self.cfg.loss, alpha=self.cfg.train_alpha)
        if not torch.isfinite(loss):
            raise NumericError(f"non-finite loss at step {self.step}", step=self.step)
        loss.backward()
        self.optimizer.step()
        self.step += 1
        self._emit({
            "step": self.step,
            "loss_total": diag["loss_total"],
            "loss_diff": diag["loss_diff"],
            "fair_per_block": [diag["fair_per_block"][k] for k in sorted(diag["fair_per_block"])],
        })

    def run(self, stop_step=None) -> TrainResult:
        cfg = self.cfg
        end = cfg.total_steps if stop_step is None else min(stop_step, cfg.total_steps)
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
        if self.step == 0:
            if cfg.unet.pretrain_steps:
                log.info("pretraining base for %d steps", cfg.unet.pretrain_steps)
                pretrain_base(self.model, self.dataset, cfg)
            self.probe[0] = probe_loss(self.model, self.cache, cfg)
            self.checkpoint()
        while self.step < end:
            try:
                self.train_step()
            except NumericError:
                log.error("aborting at step %d; last good checkpoint %s", self.step,
                          self.last_checkpoint)
                raise
            if self.step % cfg.checkpoint_every == 0 or self.step == end:
                self.probe[self.step] = probe_loss(self.model, self.cache, cfg)
                self.checkpoint()
        return TrainResult(self.model, self.step, self.last_checkpoint, self.diagnostics,
                           self.probe)


def train(cfg: TrainConfig, out_dir=None, stop_step=None, dataset=None) -> TrainResult:
    """Optimise the adapters, projector and null identity on the synthetic dataset."""
    return Trainer(cfg, out_dir, dataset).run(stop_step)


def _config_diff(a: dict, b: dict, prefix="") -> list[str]:
    out = []
    for key in sorted(set(a) | set(b)):
        va, vb = a.get(key), b.get(key)
        if isinstance(va, dict) and isinstance(vb, dict):
            out += _config_diff(va, vb, f"{prefix}{key}.")
        elif va != vb and not (isinstance(va, (list, tuple)) and list(va) == list(vb or [])):
            out.append(f"{prefix}{key}: checkpoint={va!r} current={vb!r}")
    return out


def resume(checkpoint, cfg: Optional[TrainConfig] = None, out_dir=None, stop_step=None,
           dataset=None) -> TrainResult:
    """Continue a run from ``checkpoint``; refuses when the config hash differs."""
    model, manifest, _ = load_checkpoint(checkpoint)
    if cfg is not None and config_hash(cfg) != manifest["config_hash"]:
        diff = _config_diff(manifest["config"], to_dict(cfg))
        raise CheckpointError("config hash mismatch: " + "; ".join(diff or ["(unknown)"]))
    cfg = model.cfg
    model, manifest, optimizer = load_checkpoint(checkpoint, lambda m: make_optimizer(m, cfg))
    out_dir = Path(checkpoint).parent if out_dir is None else out_dir
    trainer = Trainer(cfg, out_dir, dataset, model, optimizer, start_step=manifest["step"])
    trainer.last_checkpoint = Path(checkpoint)
    return trainer.run(stop_step)
