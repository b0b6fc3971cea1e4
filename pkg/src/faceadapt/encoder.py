"""Identity encoding: face masking, a frozen face-expert stand-in, projection.

The identity embedding is ``project(encoder_tokens(mask(image)))``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .attention import TransformerBlock
from .config import EncoderConfig, ProjectionConfig
from .errors import InvalidConfigError, InvalidInputError, NumericError


@dataclass(frozen=True)
class FaceImage:
    pixels: np.ndarray  # (H, W, C) in [0, 1]
    face_mask: np.ndarray  # (H, W) in {0, 1}

    def __post_init__(self):
        if self.pixels.ndim != 3:
            raise InvalidInputError(f"pixels must be (H, W, C), got {self.pixels.shape}")
        if self.face_mask.shape != self.pixels.shape[:2]:
            raise InvalidInputError(
                f"mask shape {self.face_mask.shape} does not match pixels {self.pixels.shape[:2]}"
            )


def mask_face_region(image: FaceImage) -> FaceImage:
    """Zero every pixel outside the face mask."""
    return FaceImage(image.pixels * image.face_mask[..., None], image.face_mask)


class PatchLinearEncoder(nn.Module):
    """Frozen patch embedding with a positional bias and nothing else."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        gen = torch.Generator().manual_seed(cfg.seed)
        patch_dim = cfg.patch_size**2 * cfg.channels
        self.patch_weight = nn.Parameter(
            torch.randn(patch_dim, cfg.embed_dim, generator=gen) / patch_dim**0.5,
            requires_grad=False,
        )
        self.pos_bias = nn.Parameter(
            0.02 * torch.randn(cfg.n_patches, cfg.embed_dim, generator=gen), requires_grad=False
        )
        self.cls_token = nn.Parameter(
            0.02 * torch.randn(1, cfg.embed_dim, generator=gen), requires_grad=False
        )

    @property
    def embed_dim(self):
        return self.cfg.embed_dim

    @property
    def n_tokens(self):
        return self.cfg.n_patches + int(self.cfg.include_cls)

    def patchify(self, pixels):
        """(..., H, W, C) -> (..., N_f, p*p*C), row-major over patches."""
        p = self.cfg.patch_size
        *lead, h, w, c = pixels.shape
        x = pixels.reshape(*lead, h // p, p, w // p, p, c)
        x = x.transpose(-4, -3)
        return x.reshape(*lead, (h // p) * (w // p), p * p * c)

    def embed(self, pixels):
        tokens = self.patchify(pixels) @ self.patch_weight + self.pos_bias
        if self.cfg.include_cls:
            cls = self.cls_token.expand(*tokens.shape[:-2], 1, -1)
            tokens = torch.cat([cls, tokens], dim=-2)
        return tokens

    def forward(self, pixels):
        return self.embed(pixels)

    def _as_tensor(self, pixels):
        if isinstance(pixels, FaceImage):
            pixels = pixels.pixels
        t = torch.as_tensor(np.asarray(pixels), dtype=self.patch_weight.dtype)
        h, w, c = t.shape[-3:]
        if (h, w, c) != (self.cfg.image_size, self.cfg.image_size, self.cfg.channels):
            raise InvalidInputError(f"encoder expects {self.cfg.image_size}px images, got {t.shape}")
        return t

    @torch.no_grad()
    def encode(self, image) -> torch.Tensor:
        """Penultimate-layer tokens, shape (N_f, d_f); batched input allowed."""
        return self(self._as_tensor(image))

    @torch.no_grad()
    def global_embedding(self, image) -> torch.Tensor:
        tokens = self.encode(image)
        if self.cfg.include_cls:
            tokens = tokens[..., 1:, :]
        g = tokens.mean(dim=-2)
        norm = g.norm(dim=-1, keepdim=True)
        if torch.any(norm == 0):
            raise NumericError("zero-norm global embedding")
        return g / norm


class ToyFaceEncoder(PatchLinearEncoder):
    """Randomly initialised, frozen ViT trunk standing in for a face expert.

    ``encode`` returns the trunk output, i.e. the layer below the (absent)
    recognition head; ``global_embedding`` is the L2-normalised mean token.
    """

    def __init__(self, cfg: EncoderConfig):
        super().__init__(cfg)
        with torch.random.fork_rng():
            torch.manual_seed(cfg.seed + 1)
            self.blocks = nn.ModuleList(
                TransformerBlock(cfg.embed_dim, cfg.heads) for _ in range(cfg.depth)
            )
        self.requires_grad_(False)

    def forward(self, pixels):
        x = self.embed(pixels)
        for block in self.blocks:
            x = block(x)
        return x


ENCODERS = {"toy": ToyFaceEncoder, "patch_linear": PatchLinearEncoder}


def build_encoder(cfg: EncoderConfig) -> PatchLinearEncoder:
    try:
        cls = ENCODERS[cfg.kind]
    except KeyError:
        raise InvalidConfigError(f"unknown encoder.kind {cfg.kind!r}") from None
    return cls(cfg).eval()


def extract_penultimate_tokens(image, encoder) -> torch.Tensor:
    tokens = encoder.encode(image)
    if not torch.isfinite(tokens).all():
        raise NumericError("encoder produced non-finite tokens")
    return tokens


class IdentityProjector(nn.Module):
    """Learnable projection of face-expert tokens into the U-Net token space.

    Width map d_f -> d_model, a learned linear resampling N_f -> N_id on the
    token axis, then ``n_blocks`` pre-norm transformer blocks.
    """

    def __init__(self, in_dim, n_in, d_model, cfg: ProjectionConfig):
        super().__init__()
        self.in_dim = in_dim
        self.n_in = n_in
        self.proj_in = nn.Linear(in_dim, d_model)
        self.resample = nn.Parameter(torch.randn(cfg.n_id, n_in) / n_in**0.5)
        self.blocks = nn.ModuleList(
            TransformerBlock(d_model, cfg.heads) for _ in range(cfg.n_blocks)
        )

    def forward(self, raw):
        if raw.shape[-1] != self.in_dim or raw.shape[-2] != self.n_in:
            raise InvalidConfigError(
                f"projector expects (*, {self.n_in}, {self.in_dim}) tokens, got {tuple(raw.shape)}"
            )
        x = self.resample @ self.proj_in(raw)
        for block in self.blocks:
            x = block(x)
        return x


def project_identity(raw, projector: IdentityProjector) -> torch.Tensor:
    return projector(raw)


# --- image I/O --------------------------------------------------------------


def load_image(path) -> np.ndarray:
    """Load a PNG, or a raw float32 binary with a ``.json`` sidecar giving its shape."""
    path = Path(path)
    if path.suffix.lower() == ".png":
        from PIL import Image

        return np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0
    sidecar = path.with_suffix(path.suffix + ".json")
    if not sidecar.exists():
        sidecar = path.with_suffix(".json")
    meta = json.loads(sidecar.read_text())
    dtype = np.dtype(meta.get("dtype", "<f4"))
    data = np.fromfile(path, dtype=dtype)
    return data.reshape(meta["shape"]).astype(np.float64)


def save_raw(path, array) -> None:
    path = Path(path)
    arr = np.ascontiguousarray(array, dtype="<f4")
    arr.tofile(path)
    path.with_suffix(path.suffix + ".json").write_text(
        json.dumps({"shape": list(arr.shape), "dtype": "<f4"})
    )


def save_png(path, pixels) -> None:
    from PIL import Image

    arr = np.clip(np.asarray(pixels) * 255.0 + 0.5, 0, 255).astype(np.uint8)
    if arr.ndim == 2:
        Image.fromarray(arr, mode="L").save(path)
    else:
        Image.fromarray(arr).save(path)
