"""Configuration dataclasses, TOML loading and dotted-key overrides."""

from __future__ import annotations

import dataclasses
import difflib
import hashlib
import json
from dataclasses import dataclass, field
from typing import Any, Optional

from .errors import InvalidConfigError


@dataclass(frozen=True)
class EncoderConfig:
    kind: str = "toy"
    image_size: int = 64
    channels: int = 3
    patch_size: int = 8
    embed_dim: int = 32
    depth: int = 2
    heads: int = 2
    include_cls: bool = False
    seed: int = 1234

    @property
    def n_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2


@dataclass(frozen=True)
class ProjectionConfig:
    n_id: int = 4
    n_blocks: int = 4
    heads: int = 2


@dataclass(frozen=True)
class UNetConfig:
    levels: int = 2
    # transformer blocks per resolution level (index 0 = full latent grid)
    down_blocks: tuple = (1, 1)
    mid_blocks: int = 1
    up_blocks: tuple = (2, 1)
    d_model: int = 64
    heads: int = 2
    n_timesteps: int = 100
    beta_start: float = 1e-3
    beta_end: float = 0.2
    latent_shape: tuple = (4, 8, 8)
    n_text_tokens: int = 8
    text_vocab: int = 8
    # None means every transformer block carries an adapter
    gsa_blocks: Optional[tuple] = None
    seed: int = 0
    # text-only denoising run that stands in for a pretrained base model;
    # "faceless" trains on the scenes with every face painted neutral grey
    pretrain_steps: int = 2500
    pretrain_lr: float = 1e-3
    pretrain_batch: int = 16
    pretrain_data: str = "faceless"


@dataclass(frozen=True)
class LossWeights:
    lambda_fair: float = 0.01
    mask_prob: float = 0.5
    # None means FAIR sums over every adapter-equipped block
    fair_blocks: Optional[tuple] = None
    diffusion_norm: str = "masked_mean"  # or "l2"
    eps_den: float = 1e-8


@dataclass(frozen=True)
class CurriculumSchedule:
    shuffle_start: float = 0.2
    shuffle_end: float = 0.6
    drop_prob: float = 0.1
    text_drop_prob: float = 0.1
    total_steps: int = 2000
    drop_mode: str = "learned_null"  # learned_null | zeros | bypass


@dataclass(frozen=True)
class SamplerConfig:
    cfg_scale: float = 7.0
    steps: int = 50
    alpha: float = 0.5
    neg_text: int = 0
    seed: int = 0
    space: str = "epsilon"  # or "latent"
    clip_x0: Optional[float] = None


@dataclass(frozen=True)
class DatasetConfig:
    n_identities: int = 10
    n_per_identity: int = 10
    image_size: int = 64
    seed: int = 7


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "adam"
    lr: float = 1e-4
    batch_size: int = 8
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass(frozen=True)
class TrainConfig:
    unet: UNetConfig = field(default_factory=UNetConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    projection: ProjectionConfig = field(default_factory=ProjectionConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    curriculum: CurriculumSchedule = field(default_factory=CurriculumSchedule)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    total_steps: int = 2000
    seed: int = 0
    checkpoint_every: int = 500
    train_alpha: float = 1.0
    dtype: str = "float32"  # float64 for gradient checks
    probe_size: int = 32

    def __post_init__(self):
        validate(self)


# keys that do not change what a run computes
_HASH_EXCLUDED = {"checkpoint_every"}


def validate(cfg: TrainConfig) -> None:
    problems = []
    if cfg.optimizer.lr <= 0:
        problems.append("optimizer.lr must be > 0")
    if cfg.optimizer.batch_size < 1:
        problems.append("optimizer.batch_size must be >= 1")
    if cfg.optimizer.kind != "adam":
        problems.append(f"optimizer.kind {cfg.optimizer.kind!r} unsupported")
    c = cfg.curriculum
    if not 0 <= c.shuffle_start <= c.shuffle_end <= 1:
        problems.append("curriculum requires 0 <= shuffle_start <= shuffle_end <= 1")
    if not 0 <= c.drop_prob <= 1 or not 0 <= c.text_drop_prob <= 1:
        problems.append("drop probabilities must lie in [0, 1]")
    if c.drop_mode not in ("learned_null", "zeros", "bypass"):
        problems.append(f"curriculum.drop_mode {c.drop_mode!r} unknown")
    if cfg.loss.lambda_fair < 0 or not 0 <= cfg.loss.mask_prob <= 1:
        problems.append("loss weights must be nonnegative, mask_prob in [0, 1]")
    if cfg.loss.diffusion_norm not in ("masked_mean", "l2"):
        problems.append(f"loss.diffusion_norm {cfg.loss.diffusion_norm!r} unknown")
    if cfg.sampler.steps < 1 or cfg.sampler.cfg_scale < 0:
        problems.append("sampler needs steps >= 1 and cfg_scale >= 0")
    if cfg.sampler.space not in ("epsilon", "latent"):
        problems.append(f"sampler.space {cfg.sampler.space!r} unknown")
    if not 0 <= cfg.sampler.alpha <= 2 or not 0 <= cfg.train_alpha <= 2:
        problems.append("adapter scale alpha must lie in [0, 2]")
    if cfg.dtype not in ("float32", "float64"):
        problems.append(f"dtype {cfg.dtype!r} unknown")
    if cfg.total_steps < 0:
        problems.append("total_steps must be >= 0")
    if cfg.encoder.kind not in ("toy", "patch_linear"):
        problems.append(f"encoder.kind {cfg.encoder.kind!r} unknown")
    if cfg.encoder.image_size % cfg.encoder.patch_size:
        problems.append("encoder.image_size must be a multiple of patch_size")
    u = cfg.unet
    if len(u.down_blocks) != u.levels or len(u.up_blocks) != u.levels:
        problems.append("unet.down_blocks/up_blocks need one entry per level")
    if u.pretrain_data not in ("faceless", "target"):
        problems.append(f"unet.pretrain_data {u.pretrain_data!r} unknown")
    if u.pretrain_steps < 0:
        problems.append("unet.pretrain_steps must be >= 0")
    if u.d_model % u.heads:
        problems.append("unet.d_model must be divisible by unet.heads")
    if problems:
        raise InvalidConfigError("; ".join(problems))


def to_dict(cfg) -> dict:
    return dataclasses.asdict(cfg)


def config_hash(cfg: TrainConfig) -> str:
    d = {k: v for k, v in to_dict(cfg).items() if k not in _HASH_EXCLUDED}
    blob = json.dumps(d, sort_keys=True, default=list).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def flat_keys(cfg=None, prefix="") -> list[str]:
    cfg = TrainConfig() if cfg is None else cfg
    keys = []
    for f in dataclasses.fields(cfg):
        value = getattr(cfg, f.name)
        if dataclasses.is_dataclass(value):
            keys.extend(flat_keys(value, prefix + f.name + "."))
        else:
            keys.append(prefix + f.name)
    return keys


def _coerce(raw: Any, current: Any, key: str):
    if not isinstance(raw, str):
        if isinstance(current, tuple) and isinstance(raw, list):
            return tuple(raw)
        return raw
    text = raw.strip()
    if text.lower() in ("none", "null"):
        return None
    try:
        value = json.loads(text.replace("(", "[").replace(")", "]"))
    except json.JSONDecodeError:
        if isinstance(current, bool) or isinstance(current, (int, float)):
            raise InvalidConfigError(f"cannot parse {raw!r} for {key}") from None
        return text
    if isinstance(value, list):
        value = tuple(value)
    if isinstance(current, float) and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    return value


def _unknown_key(key: str) -> InvalidConfigError:
    close = difflib.get_close_matches(key, flat_keys(), n=1, cutoff=0.0)
    hint = f"; did you mean {close[0]!r}?" if close else ""
    return InvalidConfigError(f"unknown config key {key!r}{hint}")


def apply_overrides(cfg: TrainConfig, overrides: dict) -> TrainConfig:
    """Return a copy of ``cfg`` with dotted keys (``loss.lambda_fair``) replaced."""
    grouped: dict = {}
    top: dict = {}
    for key, raw in overrides.items():
        parts = key.split(".")
        if len(parts) == 1:
            if key not in {f.name for f in dataclasses.fields(cfg)} or dataclasses.is_dataclass(
                getattr(cfg, key)
            ):
                raise _unknown_key(key)
            top[key] = _coerce(raw, getattr(cfg, key), key)
        elif len(parts) == 2:
            section, name = parts
            sub = getattr(cfg, section, None)
            if not dataclasses.is_dataclass(sub) or name not in {
                f.name for f in dataclasses.fields(sub)
            }:
                raise _unknown_key(key)
            grouped.setdefault(section, {})[name] = _coerce(raw, getattr(sub, name), key)
        else:
            raise _unknown_key(key)
    for section, values in grouped.items():
        top[section] = dataclasses.replace(getattr(cfg, section), **values)
    new = dataclasses.replace(cfg, **top)
    # the curriculum follows the run length unless set explicitly
    if "total_steps" in top and "curriculum.total_steps" not in overrides:
        new = dataclasses.replace(
            new, curriculum=dataclasses.replace(new.curriculum, total_steps=new.total_steps)
        )
    return new


def from_dict(data: dict) -> TrainConfig:
    flat = {}
    for key, value in data.items():
        if isinstance(value, dict):
            for sub, v in value.items():
                flat[f"{key}.{sub}"] = v
        else:
            flat[key] = value
    return apply_overrides(TrainConfig(), flat)


def load_toml(path) -> TrainConfig:
    try:
        import tomllib
    except ModuleNotFoundError:  # Python < 3.11
        import tomli as tomllib
    with open(path, "rb") as fh:
        try:
            data = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise InvalidConfigError(f"{path}: {exc}") from None
    return from_dict(data)
