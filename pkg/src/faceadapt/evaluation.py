"""Desk-scale identity and locality measurements, and the ablation runner."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
import torch

from .backbone import decode_latent, encode_latent
from .config import TrainConfig, apply_overrides, config_hash
from .errors import FaceAdaptError, NumericError
from .objective import downsample_mask
from .sampler import IncrementProfile, profiled_sample

log = logging.getLogger(__name__)


def identity_similarity(gen_image, ref_image, encoder) -> float:
    """Cosine between the encoder's global embeddings of two face-masked images."""
    g = encoder.global_embedding(torch.as_tensor(np.stack([gen_image, ref_image])))
    return float((g[0] * g[1]).sum().clamp(-1, 1))


def locality_ratio(profile: IncrementProfile, masks: dict) -> dict:
    """Per block: mean profile outside the face / mean inside; None for 0/0.

    ``masks`` maps block index -> soft mask on that block's grid, (h, w) or (B, h, w).
    """
    out = {}
    for idx, p in profile.per_block.items():
        m = np.broadcast_to(np.asarray(masks[idx], dtype=np.float64), np.shape(p))
        inside_w, outside_w = m.sum(), (1 - m).sum()
        inside = (p * m).sum() / inside_w if inside_w > 0 else 0.0
        outside = (p * (1 - m)).sum() / outside_w if outside_w > 0 else 0.0
        if inside == 0:
            out[idx] = None if outside == 0 else float("inf")
        else:
            out[idx] = float(outside / inside)
    return out


def median_ratio(ratios: dict) -> Optional[float]:
    vals = [v for v in ratios.values() if v is not None]
    return float(np.median(vals)) if vals else None


@dataclass
class EvalReport:
    name: str
    config_hash: str
    identity_sim: Optional[float] = None
    identity_sim_matrix: list = field(default_factory=list)  # generated i vs reference j
    identity_wins: Optional[int] = None  # own reference beats the next identity's
    identity_wins_strict: Optional[int] = None  # own reference beats every other
    locality_ratio: dict = field(default_factory=dict)
    locality_median: Optional[float] = None
    loss_curve: list = field(default_factory=list)  # (step, diffusion loss)
    probe_loss: dict = field(default_factory=dict)
    error: Optional[str] = None

    def to_json(self) -> str:
        d = asdict(self)
        d["locality_ratio"] = {str(k): v for k, v in self.locality_ratio.items()}
        d["probe_loss"] = {str(k): v for k, v in self.probe_loss.items()}
        return json.dumps(d)

    @classmethod
    def from_json(cls, text) -> "EvalReport":
        d = json.loads(text)
        d["locality_ratio"] = {int(k): v for k, v in d["locality_ratio"].items()}
        d["probe_loss"] = {int(k): v for k, v in d["probe_loss"].items()}
        return cls(**d)


def reference_records(dataset) -> list[int]:
    return [ids[0] for _, ids in sorted(dataset.index.items())]


def evaluate(model, dataset, cfg: TrainConfig, name="run") -> EvalReport:
    """Generate one image per identity from its first record and score identity and locality."""
    refs = reference_records(dataset)
    images = np.stack([dataset.records[i].image for i in refs])
    masks = np.stack([dataset.records[i].face_mask for i in refs]).astype(np.float64)
    masked = images * masks[..., None]
    raw = model.face_encoder.encode(torch.as_tensor(masked, dtype=model.dtype))
    captions = torch.as_tensor([dataset.records[i].caption_id for i in refs])
    with torch.no_grad():
        e_id = model.identity(raw)
        z, profile = profiled_sample(model.text(captions), e_id, cfg.sampler, model)
    size = cfg.encoder.image_size
    grid = cfg.unet.latent_shape[-1]
    gen = decode_latent(z, size) * masks[..., None]
    ref = decode_latent(encode_latent(images, grid), size) * masks[..., None]
    enc = model.face_encoder
    g = enc.global_embedding(torch.as_tensor(gen, dtype=model.dtype)).double()
    r = enc.global_embedding(torch.as_tensor(ref, dtype=model.dtype)).double()
    sim = (g @ r.T).numpy()
    n = len(refs)
    own = np.diag(sim)
    wins = int(sum(own[i] > sim[i, (i + 1) % n] for i in range(n)))
    strict = int(sum(own[i] > np.delete(sim[i], i).max() for i in range(n)))
    block_masks = {
        s.index: downsample_mask(masks, s.grid).numpy() for s in model.unet.layout
    }
    ratios = locality_ratio(profile, block_masks)
    return EvalReport(
        name=name,
        config_hash=config_hash(cfg),
        identity_sim=float(own.mean()),
        identity_sim_matrix=sim.tolist(),
        identity_wins=wins,
        identity_wins_strict=strict,
        locality_ratio=ratios,
        locality_median=median_ratio(ratios),
    )


# named ablation variants: increment penalty on/off, drop+shuffle and curriculum switches
VARIANTS = {
    "fair": {},
    "nofair": {"loss.lambda_fair": 0.0},
    "dscl": {},
    "nods": {"curriculum.drop_prob": 0.0, "curriculum.shuffle_start": 0.0,
             "curriculum.shuffle_end": 0.0},
    "nocl": {"curriculum.shuffle_start": 0.6, "curriculum.shuffle_end": 0.6},
}


def resolve_variant(v):
    if isinstance(v, str):
        if v not in VARIANTS:
            raise FaceAdaptError(f"unknown variant {v!r}; choose from {sorted(VARIANTS)}")
        return v, VARIANTS[v]
    if isinstance(v, tuple):
        return v
    return json.dumps(v, sort_keys=True), dict(v)


def run_ablation(variants, base_config: TrainConfig, seed=None, out_dir=None) -> list[EvalReport]:
    """Train every variant from the same seed and dataset; failures are reported, not raised."""
    from pathlib import Path

    from .training import make_dataset, train

    reports = []
    for k, v in enumerate(variants):
        name, overrides = resolve_variant(v)
        overrides = dict(overrides)
        if seed is not None:
            overrides["seed"] = seed
        cfg = apply_overrides(base_config, overrides)
        run_dir = None if out_dir is None else Path(out_dir) / f"{k:02d}_{name}"
        try:
            result = train(cfg, run_dir, dataset=make_dataset(cfg))
            report = evaluate(result.model, make_dataset(cfg), cfg, name)
            report.probe_loss = result.probe
            report.loss_curve = [(d["step"], d["loss_diff"]) for d in result.diagnostics]
        except (NumericError, FloatingPointError) as exc:
            log.warning("variant %s failed: %s", name, exc)
            report = EvalReport(name=name, config_hash=config_hash(cfg), error=str(exc))
        if run_dir is not None:
            run_dir.mkdir(parents=True, exist_ok=True)
            (run_dir / "report.json").write_text(report.to_json())
        reports.append(report)
    return reports


def render_reports(reports) -> str:
    header = f"{'variant':<10} {'hash':<16} {'id_sim':>7} {'wins':>5} {'locality':>9} {'probe0':>8} {'probeN':>8}"
    lines = [header, "-" * len(header)]
    for r in reports:
        if r.error:
            lines.append(f"{r.name:<10} {r.config_hash:<16} error: {r.error}")
            continue
        steps = sorted(r.probe_loss)
        p0 = r.probe_loss[steps[0]] if steps else float("nan")
        pn = r.probe_loss[steps[-1]] if steps else float("nan")
        loc = float("nan") if r.locality_median is None else r.locality_median
        lines.append(
            f"{r.name:<10} {r.config_hash:<16} {r.identity_sim:>7.4f} {r.identity_wins:>5} "
            f"{loc:>9.4f} {p0:>8.4f} {pn:>8.4f}"
        )
    return "\n".join(lines)
