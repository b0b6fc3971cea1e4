import numpy as np
import pytest
import torch

from faceadapt.config import TrainConfig, apply_overrides

TINY = {
    "unet.d_model": 16,
    "unet.n_text_tokens": 2,
    "encoder.image_size": 16,
    "encoder.embed_dim": 8,
    "projection.n_id": 2,
    "projection.n_blocks": 1,
    "dataset.image_size": 16,
    "dataset.n_identities": 3,
    "dataset.n_per_identity": 2,
    "optimizer.batch_size": 2,
    "optimizer.lr": 1e-3,
    "probe_size": 4,
    "sampler.steps": 3,
    "unet.pretrain_steps": 0,
}


def tiny_config(**overrides):
    """Small model for fast tests; keys use ``__`` for dots."""
    extra = {k.replace("__", "."): v for k, v in overrides.items()}
    return apply_overrides(TrainConfig(), {**TINY, **extra})


@pytest.fixture
def tiny_cfg():
    return tiny_config()


@pytest.fixture
def tiny64():
    return tiny_config(dtype="float64")


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)
    np.random.seed(0)


def randomize_adapters(model, gen_seed=0, gamma_scale=1.0):
    """Give every adapter a nonzero gate so increments are nontrivial."""
    g = torch.Generator().manual_seed(gen_seed)
    with torch.no_grad():
        for block in model.unet.transformer_blocks():
            if block.gsa is not None:
                block.gsa.gamma.fill_(gamma_scale * (0.5 + torch.rand((), generator=g).item()))
    return model


def pytest_terminal_summary(terminalreporter):
    import sys

    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "VERDICTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
