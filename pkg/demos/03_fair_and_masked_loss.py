"""The training objective: masked denoising loss plus the increment penalty.

The penalty measures how large the adapter's increment is outside the face
relative to the tokens it modifies there, so identity edits are pushed to stay
on the face. Half of the time the denoising loss itself is restricted to the face.
"""
import numpy as np
import torch

from faceadapt.adapter import IncrementRecord
from faceadapt.objective import downsample_mask, fair_loss, masked_diffusion_loss, random_face_mask

mask = torch.tensor([[1.0, 0.0], [0.0, 0.0]])  # one face token out of four
x = 2 * torch.ones(4, 1, dtype=torch.float64)


def penalty(inc):
    return float(fair_loss(IncrementRecord(0, inc, x), mask))


print("uniform increment:", penalty(torch.ones(4, 1, dtype=torch.float64)))
print("face-only increment:", penalty(torch.tensor([[1.0], [0], [0], [0]], dtype=torch.float64)))
print("no increment:", penalty(torch.zeros(4, 1, dtype=torch.float64)))

# Masks are area-pooled from image resolution to each block's token grid.
face = np.zeros((64, 64))
face[16:48, 20:44] = 1
print("8x8 grid coverage:", float(downsample_mask(face, (8, 8)).mean()))
print("4x4 grid coverage:", float(downsample_mask(face, (4, 4)).mean()))

rng = np.random.default_rng(0)
used = sum(random_face_mask(face, 0.5, rng)[1] for _ in range(1000))
print(f"face-restricted loss drawn {used}/1000 times")

pred, eps = torch.zeros(1, 4, 8, 8), torch.ones(1, 4, 8, 8)
pred[..., 2:6, 2:6] = 1.0  # perfect on the face, wrong elsewhere
m = downsample_mask(face, (8, 8))[None]
print("loss over face only:", float(masked_diffusion_loss(pred, eps, m)))
print("loss over full image:", float(masked_diffusion_loss(pred, eps, torch.ones(1, 8, 8))))
