"""Checkpoint container: JSON manifest + raw little-endian float32 blobs.

Base and adapter parameters always live in separate blobs so adapters can
ship without base weights. The manifest fixes the blob layout: tensors are
concatenated in manifest order, C-contiguous, as little-endian float32.
"""

from __future__ import annotations

import hashlib
import json
import os

import numpy as np
import torch

from .config import ModelConfig

MANIFEST_NAME = "manifest.json"
CONFIG_NAME = "config.json"


def _to_f32_bytes(t: torch.Tensor) -> bytes:
    a = t.detach().cpu().to(torch.float32).numpy()
    return np.ascontiguousarray(a).astype("<f4", copy=False).tobytes()


def write_manifest_and_blob(path: str, component: str,
                            named: list[tuple[str, torch.Tensor]]) -> None:
    """Write/extend the manifest and the component's blob file."""
    manifest_path = os.path.join(path, MANIFEST_NAME)
    entries = []
    if os.path.exists(manifest_path):
        with open(manifest_path) as fh:
            entries = [e for e in json.load(fh) if e["component"] != component]
    blob = bytearray()
    for name, tensor in named:
        entries.append({"name": name, "shape": list(tensor.shape), "component": component})
        blob += _to_f32_bytes(tensor)
    with open(os.path.join(path, f"{component}.bin"), "wb") as fh:
        fh.write(bytes(blob))
    with open(manifest_path, "w") as fh:
        json.dump(entries, fh, indent=1)


def read_manifest_and_blob(path: str, component: str) -> list[tuple[str, torch.Tensor]]:
    with open(os.path.join(path, MANIFEST_NAME)) as fh:
        entries = [e for e in json.load(fh) if e["component"] == component]
    raw = np.fromfile(os.path.join(path, f"{component}.bin"), dtype="<f4")
    out: list[tuple[str, torch.Tensor]] = []
    offset = 0
    for e in entries:
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        chunk = raw[offset:offset + n].reshape(e["shape"])
        out.append((e["name"], torch.from_numpy(chunk.copy())))
        offset += n
    if offset != raw.size:
        raise ValueError(f"blob size mismatch in {component}.bin: manifest covers {offset} "
                         f"floats, file holds {raw.size}")
    return out


def blob_hash(named: list[tuple[str, torch.Tensor]]) -> str:
    """SHA-256 over the concatenated f32 little-endian serialization."""
    h = hashlib.sha256()
    for _, tensor in named:
        h.update(_to_f32_bytes(tensor))
    return h.hexdigest()


def model_base_hash(model: torch.nn.Module) -> str:
    """Hash of all base parameters in state-dict order, for immutability checks."""
    return blob_hash(sorted(model.state_dict().items()))


def save_checkpoint(path: str, model: torch.nn.Module, config: ModelConfig,
                    adapters=None, extra: dict | None = None) -> None:
    os.makedirs(path, exist_ok=True)
    with open(os.path.join(path, CONFIG_NAME), "w") as fh:
        payload = {"model_config": config.to_dict(), "config_hash": config.config_hash()}
        if extra:
            payload.update(extra)
        json.dump(payload, fh, indent=2, sort_keys=True)
    write_manifest_and_blob(path, "base", sorted(model.state_dict().items()))
    if adapters is not None:
        write_manifest_and_blob(path, "adapter", adapters.named_blobs())


def load_config(path: str) -> ModelConfig:
    with open(os.path.join(path, CONFIG_NAME)) as fh:
        payload = json.load(fh)
    return ModelConfig.from_dict(payload["model_config"])


def load_checkpoint(path: str) -> tuple[torch.nn.Module, ModelConfig]:
    """Rebuild the model from a checkpoint directory."""
    from .model import LipReadingModel

    config = load_config(path)
    model = LipReadingModel(config)
    state = dict(read_manifest_and_blob(path, "base"))
    missing = [k for k in model.state_dict() if k not in state]
    if missing:
        raise ValueError(f"checkpoint is missing base parameters, first: {missing[0]}")
    model.load_state_dict({k: v.reshape(model.state_dict()[k].shape) for k, v in state.items()})
    model.eval()
    return model, config
