"""Train briefly, then generate, inpaint and profile.

Pretrains the base denoiser on face-free scenes, trains the adapters and writes
images to ./demo_out. Takes about five minutes on one CPU core; the first argument
sets the adapter step count (default 1000; the acceptance runs use 2000).
"""
import sys
from pathlib import Path

import numpy as np
import torch

from faceadapt.backbone import decode_latent, encode_latent
from faceadapt.config import TrainConfig, apply_overrides
from faceadapt.encoder import FaceImage, mask_face_region, save_png
from faceadapt.evaluation import locality_ratio, reference_records
from faceadapt.objective import downsample_mask
from faceadapt.sampler import generate, increment_profile, inpaint
from faceadapt.training import make_dataset, train

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 1000
out = Path("demo_out")
out.mkdir(exist_ok=True)
cfg = apply_overrides(TrainConfig(), {
    "total_steps": steps, "checkpoint_every": max(steps, 1), "optimizer.lr": 1e-3,
})
result = train(cfg, out / "run")
print("probe loss:", {k: round(v, 4) for k, v in result.probe.items()})
model, dataset = result.model, make_dataset(cfg)
refs = reference_records(dataset)[:4]
faces = np.stack([mask_face_region(FaceImage(dataset.records[i].image,
                                             dataset.records[i].face_mask)).pixels for i in refs])
with torch.no_grad():
    e_id = model.identity(model.face_encoder.encode(torch.as_tensor(faces, dtype=torch.float32)))
    text = model.text(torch.as_tensor([dataset.records[i].caption_id for i in refs]))
    z = generate(text, e_id, cfg.sampler, model)
    template = encode_latent(dataset.images[[refs[1]] * 4], 8)
    masks = np.stack([dataset.records[refs[1]].face_mask] * 4).astype(float)
    swapped = inpaint(template, masks, text, e_id, cfg.sampler, model)
    profile = increment_profile(text[:1], e_id[:1], cfg.sampler, model)

grid = np.concatenate([
    np.concatenate(list(images), axis=1)
    for images in (dataset.images[refs], decode_latent(z, 64), decode_latent(swapped, 64))
])
save_png(out / "samples.png", grid)
print("wrote", out / "samples.png", "(rows: references, generations, faces swapped into record",
      refs[1], ")")
# How much adapter activity falls outside the reference face (1.0 = no preference).
face = dataset.records[refs[0]].face_mask[None].astype(float)
grids = {s.index: s.grid for s in model.unet.layout}
ratios = locality_ratio(profile, {i: downsample_mask(face, g).numpy() for i, g in grids.items()})
for idx, r in ratios.items():
    print(f"block {idx} {grids[idx]}: outside/inside increment {r:.3f}")
