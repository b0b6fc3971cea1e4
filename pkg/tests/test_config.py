import pytest
from hypothesis import given, settings, strategies as st

from faceadapt.config import (
    TrainConfig,
    apply_overrides,
    config_hash,
    flat_keys,
    from_dict,
    to_dict,
)
from faceadapt.errors import InvalidConfigError


def test_defaults():
    cfg = TrainConfig()
    assert cfg.optimizer.lr == 1e-4 and cfg.optimizer.batch_size == 8
    assert (cfg.optimizer.beta1, cfg.optimizer.beta2, cfg.optimizer.eps) == (0.9, 0.999, 1e-8)
    assert (cfg.total_steps, cfg.checkpoint_every) == (2000, 500)
    assert (cfg.curriculum.shuffle_start, cfg.curriculum.shuffle_end) == (0.2, 0.6)
    assert cfg.curriculum.drop_prob == 0.1
    assert cfg.loss.lambda_fair == 0.01 and cfg.loss.mask_prob == 0.5
    assert cfg.sampler.cfg_scale == 7.0 and cfg.sampler.steps == 50
    assert cfg.unet.n_timesteps == 100


@pytest.mark.parametrize("key,value", [
    ("optimizer.lr", 0), ("optimizer.batch_size", 0), ("curriculum.shuffle_start", 0.9),
    ("sampler.space", "pixel"), ("dtype", "float16"), ("loss.lambda_fair", -1),
])
def test_invalid_values(key, value):
    with pytest.raises(InvalidConfigError):
        apply_overrides(TrainConfig(), {key: value})


def test_unknown_key_nearest_suggestion():
    with pytest.raises(InvalidConfigError, match="'sampler.cfg_scale'"):
        apply_overrides(TrainConfig(), {"sampler.cfg_scael": 3})
    with pytest.raises(InvalidConfigError, match="did you mean"):
        apply_overrides(TrainConfig(), {"unet": 3})


def test_string_coercion():
    cfg = apply_overrides(TrainConfig(), {
        "optimizer.lr": "1e-3", "unet.gsa_blocks": "[0, 2]", "sampler.clip_x0": "none",
        "curriculum.drop_mode": "bypass", "total_steps": "10"})
    assert cfg.optimizer.lr == 1e-3 and cfg.unet.gsa_blocks == (0, 2)
    assert cfg.sampler.clip_x0 is None and cfg.curriculum.drop_mode == "bypass"
    assert cfg.curriculum.total_steps == 10


def test_hash_tracks_computation_only():
    base = TrainConfig()
    assert config_hash(base) == config_hash(apply_overrides(base, {"checkpoint_every": 7}))
    assert config_hash(base) != config_hash(apply_overrides(base, {"seed": 1}))


@settings(max_examples=25, deadline=None)
@given(lam=st.floats(0, 1), seed=st.integers(0, 2**31), steps=st.integers(0, 5000))
def test_dict_round_trip(lam, seed, steps):
    cfg = apply_overrides(TrainConfig(), {"loss.lambda_fair": lam, "seed": seed,
                                          "total_steps": steps})
    back = from_dict(to_dict(cfg))
    assert back == cfg and config_hash(back) == config_hash(cfg)


def test_flat_keys_cover_sections():
    keys = flat_keys()
    assert "loss.lambda_fair" in keys and "seed" in keys
    assert all(k.count(".") <= 1 for k in keys)
