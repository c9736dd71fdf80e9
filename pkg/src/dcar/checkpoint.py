"""Checkpoint directories: ``manifest.json`` plus one ``tensors.bin`` blob.

The blob is every tensor in manifest order, each written as u32 rank, u32
extents and little-endian float32 data. The manifest carries the format
version, the role (``base`` or ``policy``), a config snapshot, the tensor
index (name, shape, offset) and the blob's sha256.
"""
from __future__ import annotations

import hashlib
import io
import json
from pathlib import Path

import numpy as np

from .model import CarModel, CarModelConfig
from .policy import PolicyConfig, SchedulerPolicy
from .tensor import Tensor, read_array, write_array

FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path: str | Path, role: str, config: dict, tensors: dict[str, np.ndarray]) -> str:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    buf = io.BytesIO()
    index = []
    for name, arr in tensors.items():
        offset = buf.tell()
        write_array(buf, arr)
        index.append({"name": name, "shape": list(arr.shape), "offset": offset})
    blob = buf.getvalue()
    digest = hashlib.sha256(blob).hexdigest()
    manifest = {"format_version": FORMAT_VERSION, "role": role, "config": config,
                "tensors": index, "sha256": digest}
    (path / "tensors.bin").write_bytes(blob)
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return digest


def load_checkpoint(path: str | Path, role: str | None = None) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format {manifest.get('format_version')}")
    if role is not None and manifest.get("role") != role:
        raise CheckpointError(f"expected a {role!r} checkpoint, found {manifest.get('role')!r}")
    blob = (path / "tensors.bin").read_bytes()
    if hashlib.sha256(blob).hexdigest() != manifest["sha256"]:
        raise CheckpointError(f"checkpoint hash mismatch in {path}")
    fp = io.BytesIO(blob)
    tensors = {}
    for entry in manifest["tensors"]:
        fp.seek(entry["offset"])
        arr = read_array(fp)
        if list(arr.shape) != entry["shape"]:
            raise CheckpointError(f"shape mismatch for {entry['name']}")
        tensors[entry["name"]] = arr
    return manifest, tensors


def _as_params(tensors: dict[str, np.ndarray]) -> dict[str, Tensor]:
    return {k: Tensor(v, requires_grad=True, name=k) for k, v in tensors.items()}


def save_model(path, model: CarModel, extra: dict | None = None) -> str:
    return save_checkpoint(path, "base", {"model": model.cfg.to_dict(), **(extra or {})}, model.state_dict())


def load_model(path) -> tuple[CarModel, dict]:
    manifest, tensors = load_checkpoint(path, "base")
    cfg = CarModelConfig(**manifest["config"]["model"])
    expected = set(CarModel(cfg).params)
    if set(tensors) != expected:
        raise CheckpointError("tensor names do not match the model layout")
    return CarModel(cfg, _as_params(tensors)), manifest


def save_policy(path, policy: SchedulerPolicy, extra: dict | None = None) -> str:
    return save_checkpoint(path, "policy",
                           {"policy": policy.cfg.to_dict(), "action_set": list(policy.action_set), **(extra or {})},
                           policy.state_dict())


def load_policy(path) -> tuple[SchedulerPolicy, dict]:
    manifest, tensors = load_checkpoint(path, "policy")
    cfg = PolicyConfig(**manifest["config"]["policy"])
    return SchedulerPolicy(cfg, _as_params(tensors)), manifest
