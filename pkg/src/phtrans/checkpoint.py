"""Bit-exact parameter persistence: a JSON manifest (tensor names, shapes,
dtypes, byte offsets, config echo, iteration, loss history) followed by raw
little-endian buffers."""

from __future__ import annotations

import dataclasses
import json
import struct
from pathlib import Path

import numpy as np

from .model import ModelConfig, PHTransParams, build_model, named_parameters

MAGIC = b"PHTCKPT1"

_DTYPE_TAGS = {np.dtype(np.float32): "<f4", np.dtype(np.float64): "<f8"}


class CheckpointError(ValueError):
    pass


def config_to_dict(cfg: ModelConfig) -> dict:
    # json serializes the tuples as lists; config_from_dict restores them
    return dataclasses.asdict(cfg)


def config_from_dict(d: dict) -> ModelConfig:
    fields = {f.name for f in dataclasses.fields(ModelConfig)}
    unknown = set(d) - fields
    if unknown:
        raise CheckpointError(f"unknown model config keys: {sorted(unknown)}")
    missing = {f.name for f in dataclasses.fields(ModelConfig) if f.default is dataclasses.MISSING} - set(d)
    if missing:
        raise CheckpointError(f"missing model config keys: {sorted(missing)}")
    kw = dict(d)
    for key in ("heads", "window", "patch_size"):
        if key in kw:
            kw[key] = tuple(kw[key])
    if "strides" in kw:
        kw["strides"] = tuple(tuple(s) for s in kw["strides"])
    return ModelConfig(**kw)


def save_checkpoint(
    path,
    params: PHTransParams,
    model_cfg: ModelConfig,
    iteration: int = 0,
    loss_history: list[float] | None = None,
    extra: dict | None = None,
):
    entries = []
    buffers = []
    offset = 0
    for name, tensor in named_parameters(params):
        tag = _DTYPE_TAGS.get(tensor.data.dtype)
        if tag is None:
            raise CheckpointError(f"{name}: unsupported dtype {tensor.data.dtype}")
        raw = tensor.data.astype(tag, copy=False).tobytes()
        entries.append(
            {
                "name": name,
                "shape": list(tensor.shape),
                "dtype": tag,
                "offset": offset,
                "nbytes": len(raw),
            }
        )
        buffers.append(raw)
        offset += len(raw)
    manifest = {
        "iteration": int(iteration),
        "loss_history": [float(x) for x in (loss_history or [])],
        "model_config": config_to_dict(model_cfg),
        "tensors": entries,
    }
    if extra:
        manifest["extra"] = extra
    blob = json.dumps(manifest).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for raw in buffers:
            fh.write(raw)


def read_manifest(path) -> dict:
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file")
        (length,) = struct.unpack("<Q", fh.read(8))
        return json.loads(fh.read(length).decode("utf-8"))


def load_checkpoint(path) -> tuple[PHTransParams, ModelConfig, dict]:
    """Rebuild the parameter structure and restore every buffer bit-exactly."""
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file")
        (length,) = struct.unpack("<Q", fh.read(8))
        manifest = json.loads(fh.read(length).decode("utf-8"))
        payload = fh.read()
    cfg = config_from_dict(manifest["model_config"])
    params = build_model(cfg, seed=0)
    by_name = {e["name"]: e for e in manifest["tensors"]}
    seen = set()
    for name, tensor in named_parameters(params):
        entry = by_name.get(name)
        if entry is None:
            raise CheckpointError(f"checkpoint is missing tensor {name}")
        seen.add(name)
        if list(tensor.shape) != entry["shape"]:
            raise CheckpointError(
                f"{name}: manifest shape {entry['shape']} != built {list(tensor.shape)}"
            )
        raw = payload[entry["offset"] : entry["offset"] + entry["nbytes"]]
        if len(raw) != entry["nbytes"]:
            raise CheckpointError(f"{name}: truncated buffer")
        buf = np.frombuffer(raw, dtype=entry["dtype"]).reshape(entry["shape"])
        tensor.data = buf.astype(tensor.data.dtype, copy=True)
    unused = set(by_name) - seen
    if unused:
        raise CheckpointError(f"checkpoint holds unknown tensors: {sorted(unused)[:3]}")
    return params, cfg, manifest
