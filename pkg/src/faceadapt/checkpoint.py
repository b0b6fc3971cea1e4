"""Checkpoint directories: one little-endian flat binary per tensor plus a JSON manifest."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np
import torch

from .config import config_hash, from_dict, to_dict
from .errors import CheckpointError

FORMAT_VERSION = 1


def _safe(name):
    return name.replace("/", "_") + ".bin"


def save_checkpoint(directory, model, step, optimizer=None, extra=None):
    from .backbone import optimized_parameters

    directory = Path(directory)
    (directory / "tensors").mkdir(parents=True, exist_ok=True)
    trainable = {id(p) for p in optimized_parameters(model).values()}
    store = "<f8" if model.cfg.dtype == "float64" else "<f4"
    tensors = {}

    def write(name, tensor, role):
        arr = np.asarray(tensor.detach().cpu().numpy(), dtype=store)
        data = arr.tobytes()
        (directory / "tensors" / _safe(name)).write_bytes(data)
        tensors[name] = {"shape": list(arr.shape), "role": role, "dtype": store,
                         "sha256": hashlib.sha256(data).hexdigest()}

    for name, p in model.state_dict(keep_vars=True).items():
        write(name, p, "trainable" if id(p) in trainable else "frozen")
    if optimizer is not None:
        names = {id(p): n for n, p in model.named_parameters()}
        for p, state in optimizer.state.items():
            for key, value in state.items():
                write(f"optim.{names[id(p)]}.{key}", torch.as_tensor(value), "optimizer")
    manifest = {
        "format": FORMAT_VERSION,
        "step": int(step),
        "config_hash": config_hash(model.cfg),
        "config": to_dict(model.cfg),
        "rng_state": {"kind": "step-keyed", "seed": model.cfg.seed, "next_step": int(step)},
        "tensors": tensors,
    }
    if extra:
        manifest.update(extra)
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return directory


def read_manifest(directory) -> dict:
    path = Path(directory) / "manifest.json"
    if not path.exists():
        raise CheckpointError(f"no manifest at {path}")
    return json.loads(path.read_text())


def _read_tensor(directory, name, meta):
    path = Path(directory) / "tensors" / _safe(name)
    if not path.exists():
        raise CheckpointError(f"missing tensor file for {name!r}")
    data = path.read_bytes()
    if hashlib.sha256(data).hexdigest() != meta["sha256"]:
        raise CheckpointError(f"tensor {name!r} is corrupted (checksum mismatch)")
    arr = np.frombuffer(data, dtype=np.dtype(meta["dtype"]))
    if arr.size != int(np.prod(meta["shape"])):
        raise CheckpointError(f"tensor {name!r} has wrong size")
    return torch.from_numpy(arr.reshape(meta["shape"]).copy())


def load_checkpoint(directory, optimizer_factory=None):
    """Rebuild the model stored in ``directory``; returns (model, manifest, optimizer)."""
    from .backbone import FaceAdapterModel

    manifest = read_manifest(directory)
    cfg = from_dict(manifest["config"])
    model = FaceAdapterModel(cfg)
    state = {}
    for name, meta in manifest["tensors"].items():
        if meta["role"] != "optimizer":
            state[name] = _read_tensor(directory, name, meta)
    with torch.no_grad():
        for name, p in model.state_dict(keep_vars=True).items():
            if name not in state:
                raise CheckpointError(f"checkpoint lacks tensor {name!r}")
            p.copy_(state[name].reshape(p.shape))
    optimizer = None
    if optimizer_factory is not None:
        optimizer = optimizer_factory(model)
        params = dict(model.named_parameters())
        for name, meta in manifest["tensors"].items():
            if meta["role"] != "optimizer":
                continue
            pname, key = name[len("optim."):].rsplit(".", 1)
            value = _read_tensor(directory, name, meta).to(params[pname].dtype)
            optimizer.state[params[pname]][key] = value.reshape(()) if key == "step" else value
    return model, manifest, optimizer


def tensor_digest(named_tensors) -> str:
    h = hashlib.sha256()
    for name in sorted(named_tensors):
        h.update(name.encode())
        h.update(named_tensors[name].detach().cpu().numpy().tobytes())
    return h.hexdigest()


def checkpoint_digest(directory, roles=("frozen", "trainable")) -> str:
    """Digest of the stored tensors with the given roles (weights only by default)."""
    manifest = read_manifest(directory)
    h = hashlib.sha256()
    for name in sorted(manifest["tensors"]):
        meta = manifest["tensors"][name]
        if meta["role"] in roles:
            h.update(name.encode())
            h.update(meta["sha256"].encode())
    return h.hexdigest()
