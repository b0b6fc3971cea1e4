"""Identity-conditioned face adapter for a miniature latent diffusion model."""

from .adapter import GatedSelfAttention, IncrementRecord, apply_adapter, gated_self_attention, token_select
from .backbone import FaceAdapterModel, NoiseSchedule, add_noise, predict_noise, trainable_parameters
from .config import TrainConfig, apply_overrides, load_toml
from .curriculum import generate_synthetic_identity_dataset, sample_condition, schedule_shuffle_prob
from .objective import downsample_mask, fair_loss, masked_diffusion_loss, random_face_mask, total_loss
from .sampler import cfg_combine, generate, increment_profile, inpaint
from .training import resume, train

__version__ = "0.1.0"
