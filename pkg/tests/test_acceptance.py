"""Acceptance criteria, one test each.

Every test records a one-line PASS/FAIL verdict; the lines are printed together at the end
of the pytest run (see ``pytest_terminal_summary`` in conftest.py). Tolerances and runtime
budgets are pinned here and must not be loosened to turn a criterion green.
"""

import time

import numpy as np
import pytest
import torch

from faceadapt.adapter import IncrementRecord
from faceadapt.backbone import FaceAdapterModel, encode_latent, optimized_parameters, predict_noise
from faceadapt.checkpoint import checkpoint_digest
from faceadapt.config import CurriculumSchedule, SamplerConfig, TrainConfig, apply_overrides
from faceadapt.curriculum import (
    Case,
    generate_synthetic_identity_dataset,
    sample_condition,
    schedule_shuffle_prob,
)
from faceadapt.evaluation import run_ablation
from faceadapt.objective import TrainBatch, downsample_mask, fair_loss, total_loss
from faceadapt.sampler import cfg_combine, inpaint
from faceadapt import training
from faceadapt.training import resume, train

from conftest import randomize_adapters, tiny_config

VERDICTS: list[str] = []


def verdict(number, title, ok, detail, elapsed, budget):
    within = elapsed < budget
    status = "PASS" if ok and within else "FAIL"
    VERDICTS.append(
        f"criterion {number} [{status}] {title}: {detail} ({elapsed:.1f}s, budget {budget:.0f}s)"
    )
    assert ok, detail
    assert within, f"took {elapsed:.1f}s, budget {budget}s"


# 1 ------------------------------------------------------------------------------------------

def test_c1_adapter_transparency():
    start = time.perf_counter()
    cfg = apply_overrides(TrainConfig(), {"dtype": "float64"})
    model = FaceAdapterModel(cfg)
    for block in model.unet.transformer_blocks():
        assert block.gsa.gamma.item() == 0.0
    g = torch.Generator().manual_seed(0)
    worst = 0.0
    with torch.no_grad():
        for _ in range(10):  # 10 batches of 10 random inputs
            b = 10
            z = torch.randn(b, *cfg.unet.latent_shape, generator=g, dtype=torch.float64)
            t = torch.randint(0, cfg.unet.n_timesteps, (b,), generator=g).numpy()
            text = model.text(torch.randint(0, cfg.unet.text_vocab, (b,), generator=g))
            raw = torch.randn(b, cfg.encoder.n_patches, cfg.encoder.embed_dim, generator=g,
                              dtype=torch.float64)
            with_adapter, _ = predict_noise(model, z, t, text, model.identity(raw))
            without, _ = predict_noise(model, z, t, text, None)
            worst = max(worst, (with_adapter - without).abs().max().item())
    verdict(1, "adapter transparency at gamma=0", worst <= 1e-12,
            f"max |diff| = {worst:.2e} over 100 inputs (tol 1e-12)",
            time.perf_counter() - start, 10)


# 2 ------------------------------------------------------------------------------------------

def _one_block(seed):
    rng = np.random.default_rng(seed)
    cfg = tiny_config(
        unet__levels=1, unet__down_blocks="[1]", unet__up_blocks="[0]", unet__mid_blocks=0,
        unet__latent_shape="[1, 8, 8]", unet__d_model=4, encoder__embed_dim=4, dtype="float64",
        unet__seed=int(rng.integers(1000)),
        loss__lambda_fair=float(rng.choice([0.01, 0.5, 2.0])),
        curriculum__drop_mode=str(rng.choice(["learned_null", "zeros"])),
    )
    model = randomize_adapters(FaceAdapterModel(cfg), gen_seed=seed)
    if cfg.curriculum.drop_mode == "learned_null":
        with torch.no_grad():
            model.null_identity.normal_(generator=torch.Generator().manual_seed(seed))
    b = int(rng.integers(1, 3))
    g = torch.Generator().manual_seed(seed)
    raw = torch.randn(b, cfg.encoder.n_patches, cfg.encoder.embed_dim, generator=g,
                      dtype=torch.float64)
    masks = np.zeros((b, 16, 16))
    for k in range(b):
        y, x = rng.integers(0, 8, 2)
        masks[k, y:y + 8, x:x + 8] = 1
    dropped = torch.as_tensor(rng.random(b) < 0.5)
    fixed = dict(
        z0=torch.randn(b, *cfg.unet.latent_shape, generator=g, dtype=torch.float64),
        t=rng.integers(0, cfg.unet.n_timesteps, b),
        eps=torch.randn(b, *cfg.unet.latent_shape, generator=g, dtype=torch.float64),
        text=model.text(torch.as_tensor(rng.integers(0, cfg.unet.text_vocab, b))),
        face_masks=masks,
        use_face_mask=rng.random(b) < 0.5,
    )
    alpha = float(rng.uniform(0.5, 1.5))

    def loss():
        e_id = model.identity(raw)
        e_id = torch.where(dropped[:, None, None], model.null_identity.expand_as(e_id), e_id)
        return total_loss(TrainBatch(e_id=e_id, **fixed), model, cfg.loss, alpha=alpha)[0]

    return model, loss


def _max_fd_error(loss, params, h=1e-5):
    # h near the cube root of float64 eps balances truncation against roundoff
    grads = torch.autograd.grad(loss(), params)
    worst = 0.0
    for p, g in zip(params, grads):
        flat = p.detach().view(-1)
        fd = torch.empty_like(flat)
        with torch.no_grad():
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                up = loss().item()
                flat[i] = orig - h
                down = loss().item()
                flat[i] = orig
                fd[i] = (up - down) / (2 * h)
        scale = max(fd.norm().item(), g.norm().item(), 1e-12)
        worst = max(worst, (g.view(-1) - fd).norm().item() / scale)
    return worst


def test_c2_gradient_oracle():
    start = time.perf_counter()
    errors = []
    for seed in range(5):
        model, loss = _one_block(seed)
        assert len(model.unet.transformer_blocks()) == 1
        params = list(optimized_parameters(model).values())
        errors.append(_max_fd_error(loss, params))
    worst = max(errors)
    verdict(2, "total-loss gradients vs central differences", worst <= 1e-3,
            f"worst per-tensor relative error {worst:.2e} over 5 configs (tol 1e-3)",
            time.perf_counter() - start, 60)


# 3 ------------------------------------------------------------------------------------------

def _rec(inc, x):
    return IncrementRecord(0, torch.as_tensor(inc, dtype=torch.float64),
                           torch.as_tensor(x, dtype=torch.float64))


def test_c3_fair_oracle():
    start = time.perf_counter()
    m = torch.tensor([[1.0, 0], [0, 0]], dtype=torch.float64)
    hand = fair_loss(_rec(np.ones((4, 1)), 2 * np.ones((4, 1))), m).item()
    full = fair_loss(_rec(np.random.randn(4, 3), np.random.randn(4, 3)), torch.ones(2, 2)).item()
    rng = np.random.default_rng(0)
    inc, x = rng.standard_normal((64, 8)), rng.standard_normal((64, 8))
    mask = torch.as_tensor((rng.random((8, 8)) > 0.5).astype(float))
    base = fair_loss(_rec(inc, x), mask).item()
    drift = max(abs(fair_loss(_rec(c * inc, c * x), mask).item() - base) for c in (0.1, 10.0))
    ok = abs(hand - 0.5) <= 1e-12 and full == 0.0 and drift <= 1e-10
    verdict(3, "FAIR hand case, full mask, scale invariance", ok,
            f"hand={hand!r}, full-mask={full!r}, scale drift={drift:.1e}",
            time.perf_counter() - start, 1)


# 4 ------------------------------------------------------------------------------------------

def test_c4_cfg_algebra():
    start = time.perf_counter()
    g = torch.Generator().manual_seed(0)
    a, b = torch.randn(4, 8, 8, generator=g), torch.randn(4, 8, 8, generator=g)
    zero = torch.equal(cfg_combine(a, b, 0.0), a)
    same = torch.equal(cfg_combine(a, a, 7.0), a)
    hand = torch.equal(cfg_combine(torch.tensor(1.0), torch.tensor(0.5), 7.0), torch.tensor(4.5))
    verdict(4, "guidance combine identities", zero and same and hand,
            f"scale 0 -> cond: {zero}, cond=uncond: {same}, 1 vs 0.5 at 7 -> 4.5: {hand}",
            time.perf_counter() - start, 1)


# 5 ------------------------------------------------------------------------------------------

def test_c5_curriculum_statistics():
    start = time.perf_counter()
    sched = CurriculumSchedule(total_steps=2000)
    dataset = generate_synthetic_identity_dataset(10, 10, 16, 0)
    n = 100_000
    ok = (schedule_shuffle_prob(0, sched) == 0.2 and schedule_shuffle_prob(2000, sched) == 0.6)
    worst_sigma = 0.0
    for step in (0, 1000, 2000):
        p_s = schedule_shuffle_prob(step, sched)
        rng = np.random.default_rng(step)
        counts = {case: 0 for case in Case}
        for i in range(n):
            counts[sample_condition(i % 100, step, sched, rng, dataset).case] += 1
        expect = {Case.DROPPED: 0.1, Case.SHUFFLED: 0.9 * p_s, Case.PAIRED: 0.9 * (1 - p_s)}
        for case, p in expect.items():
            sigma = np.sqrt(p * (1 - p) / n)
            worst_sigma = max(worst_sigma, abs(counts[case] / n - p) / sigma)
    ok = ok and abs(schedule_shuffle_prob(1000, sched) - 0.4) < 1e-15 and worst_sigma <= 3
    verdict(5, "curriculum case frequencies and endpoints", ok,
            f"worst deviation {worst_sigma:.2f} sigma at p_s in (0.2, 0.4, 0.6); endpoints exact",
            time.perf_counter() - start, 10)


# 6 and 7 -------------------------------------------------------------------------------------

ACCEPTANCE_OVERRIDES = {
    # desk-scale learning rate; see README
    "optimizer.lr": 1e-3,
}


@pytest.fixture(scope="module")
def ablation():
    start = time.perf_counter()
    cfg = apply_overrides(TrainConfig(), ACCEPTANCE_OVERRIDES)
    fair, nofair = run_ablation(["fair", "nofair"], cfg)
    return fair, nofair, time.perf_counter() - start


def _reduction(report):
    return 1 - report.probe_loss[2000] / report.probe_loss[0]


def test_c6_overfit_and_locality(ablation):
    fair, nofair, elapsed = ablation
    assert fair.error is None and nofair.error is None
    red_f, red_n = _reduction(fair), _reduction(nofair)
    ok = red_f >= 0.5 and red_n >= 0.5 and fair.locality_median < nofair.locality_median
    verdict(6, "overfit and locality ablation", ok,
            f"loss reduction FAIR {red_f:.1%}, no-FAIR {red_n:.1%} (need >= 50%); "
            f"median locality FAIR {fair.locality_median:.4f} vs no-FAIR "
            f"{nofair.locality_median:.4f} (need FAIR lower)",
            elapsed, 15 * 60)


def test_c7_identity_conditioning(ablation):
    fair, _, elapsed = ablation
    verdict(7, "identity conditioning after the FAIR run", fair.identity_wins >= 8,
            f"own reference beats another identity's for {fair.identity_wins}/10 identities "
            f"(need >= 8; {fair.identity_wins_strict}/10 beat every other identity)",
            elapsed, 15 * 60)


# 8 ------------------------------------------------------------------------------------------

def test_c8_inpainting_preserves_outside():
    start = time.perf_counter()
    cfg = apply_overrides(TrainConfig(), {"dtype": "float64"})
    model = randomize_adapters(FaceAdapterModel(cfg))
    dataset = generate_synthetic_identity_dataset(10, 2, 64, 3)
    rng = np.random.default_rng(8)
    picks = rng.choice(len(dataset), 20, replace=False)
    templates = encode_latent(dataset.images[picks], 8).to(torch.float64)
    masks = np.zeros((20, 64, 64))
    for k in range(20):
        h, w = rng.integers(8, 40, 2)
        y, x = rng.integers(0, 64 - h), rng.integers(0, 64 - w)
        masks[k, y:y + h, x:x + w] = 1
    raw = model.face_encoder.encode(torch.as_tensor(dataset.images[picks], dtype=torch.float64))
    with torch.no_grad():
        e_id = model.identity(raw)
        out = inpaint(templates, masks, model.text(torch.as_tensor(dataset.caption_ids[picks])),
                      e_id, SamplerConfig(seed=4), model)
    outside = (downsample_mask(masks, (8, 8)) == 0)[:, None].expand_as(out)
    identical = torch.equal(out[outside], templates[outside])
    changed = not torch.equal(out, templates)
    verdict(8, "inpainting keeps the template outside the mask", identical and changed,
            f"{int(outside.sum())} outside entries bit-identical: {identical}; 20 pairs",
            time.perf_counter() - start, 30)


# 9 ------------------------------------------------------------------------------------------

def test_c9_determinism_and_resume(tmp_path):
    start = time.perf_counter()
    cfg = apply_overrides(TrainConfig(), {"total_steps": 40, "checkpoint_every": 20,
                                          "unet.pretrain_steps": 50})
    digests = []
    for name in ("a", "b"):
        training._BASE_CACHE.clear()  # rebuild the base too, not just the adapters
        digests.append(checkpoint_digest(train(cfg, tmp_path / name).checkpoint))
    training._BASE_CACHE.clear()
    train(cfg, tmp_path / "c", stop_step=20)
    resumed = resume(tmp_path / "c" / "step_000020", cfg)
    digests.append(checkpoint_digest(resumed.checkpoint))
    d1, d2, d3 = digests
    ok = d1 == d2 == d3 and resumed.step == 40
    verdict(9, "repeat and resume digests", ok,
            f"straight {d1[:12]}, repeat {d2[:12]}, resumed {d3[:12]}",
            time.perf_counter() - start, 300)
