"""The gated self-attention adapter.

Visual tokens attend jointly with the identity tokens; only the visual rows are kept,
scaled by tanh(gamma), and added back. A fresh adapter has gamma = 0 and so leaves
the frozen base model untouched; opening the gate injects identity.
"""
import torch

from faceadapt.adapter import GatedSelfAttention, apply_adapter
from faceadapt.backbone import FaceAdapterModel, predict_noise
from faceadapt.config import TrainConfig, apply_overrides

torch.manual_seed(0)
torch.set_grad_enabled(False)
gsa = GatedSelfAttention(d_model=16, heads=2)
x = torch.randn(1, 64, 16)  # an 8x8 grid of visual tokens
e_id = torch.randn(1, 4, 16)  # four identity tokens

record = gsa(x, e_id)
print("increment shape:", tuple(record.increment.shape), "| gate:", gsa.gamma.item())
print("closed gate, max |increment|:", float(record.increment.abs().max()))

with torch.no_grad():
    gsa.gamma.fill_(0.8)
record = gsa(x, e_id)
for alpha in (0.0, 0.5, 1.0):
    out = apply_adapter(x, record, alpha)
    print(f"alpha={alpha}: mean |change| {float((out - x).abs().mean()):.4f}")

# In the full model every transformer block carries an adapter; at gamma = 0 the
# prediction matches the base model exactly.
cfg = apply_overrides(TrainConfig(), {"dtype": "float64", "unet.pretrain_steps": 0})
model = FaceAdapterModel(cfg)
z = torch.randn(2, *cfg.unet.latent_shape, dtype=torch.float64)
text = model.text(torch.tensor([1, 2]))
raw = torch.randn(2, cfg.encoder.n_patches, cfg.encoder.embed_dim, dtype=torch.float64)
with torch.no_grad():
    with_id, records = predict_noise(model, z, [10, 60], text, model.identity(raw))
    base, _ = predict_noise(model, z, [10, 60], text, None)
print(f"{len(records)} adapter blocks; max |with - without| = {float((with_id - base).abs().max())}")
