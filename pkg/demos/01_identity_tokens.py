"""From a reference photo to identity tokens.

A synthetic face is masked to its face region, run through the frozen toy face
encoder, and the penultimate patch tokens are resampled by the trainable projector
into a handful of identity tokens of the U-Net width.
"""
import numpy as np
import torch

from faceadapt.backbone import FaceAdapterModel
from faceadapt.config import TrainConfig, apply_overrides
from faceadapt.curriculum import generate_synthetic_identity_dataset
from faceadapt.encoder import FaceImage, extract_penultimate_tokens, mask_face_region

cfg = apply_overrides(TrainConfig(), {"unet.pretrain_steps": 0})
dataset = generate_synthetic_identity_dataset(3, 2, 64, rng=7)
record = dataset.records[0]
print(f"{len(dataset)} records; face covers {record.face_mask.mean():.0%} of the first image")

# Only the face is shown to the encoder, so background and hair cannot leak into the identity.
face = mask_face_region(FaceImage(record.image, record.face_mask))
print("pixels kept outside the face:", float(np.abs(face.pixels[record.face_mask == 0]).max()))

model = FaceAdapterModel(cfg)
tokens = extract_penultimate_tokens(face.pixels, model.face_encoder)
print("encoder tokens:", tuple(tokens.shape))  # (patches, encoder width)

with torch.no_grad():
    e_id = model.identity(tokens[None])
print("identity tokens:", tuple(e_id.shape))  # (batch, N_id, d_model)

# Two photos of one person are closer than photos of different people, even before training.
enc = model.face_encoder
emb = [enc.global_embedding(mask_face_region(FaceImage(r.image, r.face_mask)).pixels)
       for r in dataset.records]
same = float(emb[0] @ emb[1])
other = float(emb[0] @ emb[2])
print(f"encoder cosine: same identity {same:.3f}, different identity {other:.3f}")
