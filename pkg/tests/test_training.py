import json

import numpy as np
import pytest
import torch

from faceadapt import training
from faceadapt.backbone import FaceAdapterModel, optimized_parameters
from faceadapt.checkpoint import (
    checkpoint_digest,
    load_checkpoint,
    read_manifest,
    save_checkpoint,
    tensor_digest,
)
from faceadapt.curriculum import Case
from faceadapt.errors import CheckpointError, NumericError
from faceadapt.training import (
    DataCache,
    Trainer,
    base_parameters,
    build_batch,
    faceless,
    frozen_digest,
    pretrain_base,
    resume,
    train,
)

from conftest import tiny_config


def _weights(directory, role):
    m = read_manifest(directory)
    return {n: v["sha256"] for n, v in m["tensors"].items() if v["role"] == role}


def test_zero_step_checkpoint_matches_init(tmp_path):
    cfg = tiny_config(total_steps=0)
    fresh = FaceAdapterModel(cfg)
    res = train(cfg, tmp_path)
    assert res.step == 0
    loaded, manifest, _ = load_checkpoint(res.checkpoint)
    assert manifest["step"] == 0
    assert tensor_digest(loaded.state_dict()) == tensor_digest(fresh.state_dict())


def test_only_trainable_tensors_change(tmp_path):
    cfg = tiny_config(total_steps=4, checkpoint_every=2)
    trainer = Trainer(cfg, tmp_path)
    before = frozen_digest(trainer.model)
    trainer.run()
    assert frozen_digest(trainer.model) == before
    a, b = tmp_path / "step_000002", tmp_path / "step_000004"
    assert _weights(a, "frozen") == _weights(b, "frozen")
    ta, tb = _weights(a, "trainable"), _weights(b, "trainable")
    assert ta.keys() == tb.keys()
    assert any(ta[k] != tb[k] for k in ta)
    assert all(".gsa." in k or k.startswith("projector.") or k == "null_identity" for k in ta)


def test_resume_matches_uninterrupted(tmp_path):
    cfg = tiny_config(total_steps=6, checkpoint_every=3)
    full = train(cfg, tmp_path / "full")
    train(cfg, tmp_path / "part", stop_step=3)
    res = resume(tmp_path / "part" / "step_000003", cfg)
    assert res.step == 6
    assert checkpoint_digest(res.checkpoint) == checkpoint_digest(full.checkpoint)
    assert checkpoint_digest(res.checkpoint, ("optimizer",)) == checkpoint_digest(
        full.checkpoint, ("optimizer",))
    lines = (tmp_path / "part" / "diagnostics.jsonl").read_text().splitlines()
    assert [json.loads(x)["step"] for x in lines] == list(range(1, 7))


def test_resumed_rng_draws_same_conditions(tmp_path):
    cfg = tiny_config(total_steps=3)
    train(cfg, tmp_path, stop_step=2)
    model, manifest, _ = load_checkpoint(tmp_path / "step_000002")
    step = manifest["rng_state"]["next_step"]
    cache = DataCache.build(Trainer(cfg).dataset, model)
    a, b = [], []
    build_batch(step, model, cache, cfg, a)
    build_batch(step, FaceAdapterModel(cfg), cache, cfg, b)
    assert a == b and all(isinstance(p.case, Case) for p in a)


def test_corrupted_tensor_is_named(tmp_path):
    cfg = tiny_config()
    path = save_checkpoint(tmp_path / "ck", FaceAdapterModel(cfg), 0)
    target = next((path / "tensors").glob("projector.proj_in.weight*"))
    raw = bytearray(target.read_bytes())
    raw[0] ^= 0xFF
    target.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="projector.proj_in.weight"):
        load_checkpoint(path)


def test_config_mismatch_refused(tmp_path):
    cfg = tiny_config(total_steps=2)
    train(cfg, tmp_path, stop_step=1)
    other = tiny_config(total_steps=2, loss__lambda_fair=0.5)
    with pytest.raises(CheckpointError, match="lambda_fair"):
        resume(tmp_path / "step_000001", other)


def test_nan_aborts_and_keeps_last_checkpoint(tmp_path, monkeypatch):
    cfg = tiny_config(total_steps=4, checkpoint_every=2)
    trainer = Trainer(cfg, tmp_path)
    trainer.run(stop_step=2)
    with torch.no_grad():
        trainer.model.projector.proj_in.weight.fill_(float("nan"))
    with pytest.raises(NumericError):
        trainer.run()
    assert (tmp_path / "latest").read_text() == "step_000002"
    model, manifest, _ = load_checkpoint(tmp_path / "step_000002")
    assert manifest["step"] == 2
    assert torch.isfinite(model.projector.proj_in.weight).all()


def test_diagnostics_lines(tmp_path):
    cfg = tiny_config(total_steps=2)
    res = train(cfg, tmp_path)
    n_blocks = len(res.model.unet.transformer_blocks())
    for line in (tmp_path / "diagnostics.jsonl").read_text().splitlines():
        rec = json.loads(line)
        assert set(rec) == {"step", "loss_total", "loss_diff", "fair_per_block"}
        assert len(rec["fair_per_block"]) == n_blocks
        assert rec["loss_total"] == pytest.approx(
            rec["loss_diff"] + cfg.loss.lambda_fair * np.sum(rec["fair_per_block"]), rel=1e-5)


def test_float64_checkpoint_round_trip(tmp_path):
    cfg = tiny_config(dtype="float64")
    model = FaceAdapterModel(cfg)
    with torch.no_grad():
        model.projector.resample.add_(1e-12)
    loaded, manifest, _ = load_checkpoint(save_checkpoint(tmp_path / "c", model, 5))
    assert manifest["tensors"]["projector.resample"]["dtype"] == "<f8"
    assert torch.equal(loaded.projector.resample, model.projector.resample)


def test_faceless_copy_paints_faces_only():
    cfg = tiny_config()
    data = Trainer(cfg).dataset
    blank = faceless(data)
    for a, b in zip(data.records, blank.records):
        inside = a.face_mask > 0
        assert np.all(b.image[inside] == 0.5)
        assert np.array_equal(a.image[~inside], b.image[~inside])


def test_pretraining_touches_base_only_and_is_memoised():
    training._BASE_CACHE.clear()
    cfg = tiny_config(unet__pretrain_steps=3)
    model = FaceAdapterModel(cfg)
    adapters = tensor_digest(optimized_parameters(model))
    base_before = tensor_digest(base_parameters(model))
    data = Trainer(cfg, model=model).dataset
    curve = pretrain_base(model, data, cfg)
    assert len(curve) == 3
    assert tensor_digest(optimized_parameters(model)) == adapters
    assert tensor_digest(base_parameters(model)) != base_before
    assert not any(p.requires_grad for p in base_parameters(model).values())
    again = FaceAdapterModel(cfg)
    assert pretrain_base(again, data, cfg) == curve
    training._BASE_CACHE.clear()
    fresh = FaceAdapterModel(cfg)
    assert pretrain_base(fresh, data, cfg) == curve
    assert tensor_digest(base_parameters(fresh)) == tensor_digest(base_parameters(again))
