"""Checkpoints as a JSON manifest plus one little-endian float64 blob.

The manifest lists every array (parameters, BatchNorm buffers and, when
requested, Adam moments under ``optimizer.*`` kinds) with its byte offset
and shape, together with the model configuration and the number of
completed epochs.
"""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path

import numpy as np

from .config import SCHEMA_VERSION, ModelConfig, model_config_from_dict
from .layers import Module

_DTYPE = np.dtype("<f8")


class CheckpointError(ValueError):
    """Unreadable checkpoint or one that does not fit the model."""


def _blob_path(path: Path) -> Path:
    return path.with_suffix(path.suffix + ".bin") if path.suffix != ".bin" else path


def _entries(model: Module, with_optimizer: bool):
    for name, p in model.named_parameters():
        yield "param", name, p.data
        if with_optimizer:
            yield "optimizer.m", name, p.m
            yield "optimizer.v", name, p.v
    for name, buf in model.named_buffers():
        yield "buffer", name, buf


def save_checkpoint(path, model: Module, config: ModelConfig, epoch: int = 0, with_optimizer: bool = True,
                    extra: dict | None = None) -> Path:
    """Write ``path`` (JSON) and ``path.bin``; returns the manifest path."""
    path = Path(path)
    blob = _blob_path(path)
    arrays, index = [], []
    offset = 0
    for kind, name, arr in _entries(model, with_optimizer):
        a = np.ascontiguousarray(arr, dtype=_DTYPE)
        index.append({"kind": kind, "name": name, "shape": list(a.shape), "offset": offset})
        offset += a.nbytes
        arrays.append(a)
    steps = {name: p.t for name, p in model.named_parameters()} if with_optimizer else {}
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "model_config": dataclasses.asdict(config),
        "epoch": int(epoch),
        "optimizer": {"kind": "adam", "steps": steps} if with_optimizer else None,
        "blob": blob.name,
        "arrays": index,
        "extra": extra or {},
    }
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(blob, "wb") as fh:
            for a in arrays:
                fh.write(a.tobytes())
        path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    except OSError as exc:
        raise CheckpointError(f"cannot write checkpoint {path}: {exc}") from exc
    return path


def read_manifest(path) -> dict:
    path = Path(path)
    try:
        manifest = json.loads(path.read_text())
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"checkpoint {path} is not valid JSON: {exc}") from exc
    if manifest.get("schema_version") != SCHEMA_VERSION:
        raise CheckpointError(f"checkpoint {path}: unsupported schema_version {manifest.get('schema_version')}")
    return manifest


def checkpoint_model_config(path) -> ModelConfig:
    return model_config_from_dict(read_manifest(path)["model_config"])


def load_checkpoint(path, model: Module, with_optimizer: bool = True) -> dict:
    """Copy arrays from ``path`` into ``model`` in place; returns the manifest.

    Names and shapes must match exactly.  A width mismatch between the
    checkpoint and the model is reported with both shapes.
    """
    path = Path(path)
    manifest = read_manifest(path)
    blob = path.parent / manifest["blob"]
    try:
        raw = blob.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint data {blob}: {exc}") from exc
    params = dict(model.named_parameters())
    buffers = dict(model.named_buffers())
    saved = {(e["kind"], e["name"]): e for e in manifest["arrays"]}
    saved_params = {n for k, n in saved if k == "param"}
    if saved_params != set(params):
        missing = sorted(set(params) - saved_params)[:3]
        unexpected = sorted(saved_params - set(params))[:3]
        raise CheckpointError(
            f"checkpoint {path} does not match the model: missing {missing}, unexpected {unexpected}"
        )

    def fetch(kind, name, target):
        e = saved.get((kind, name))
        if e is None:
            raise CheckpointError(f"checkpoint {path}: no {kind} entry for {name}")
        if tuple(e["shape"]) != target.shape:
            raise CheckpointError(
                f"checkpoint {path}: width mismatch for {name}: checkpoint {tuple(e['shape'])}, model {target.shape}"
            )
        n = int(np.prod(e["shape"], dtype=np.int64))
        arr = np.frombuffer(raw, dtype=_DTYPE, count=n, offset=e["offset"]).reshape(e["shape"])
        target[...] = arr

    for name, p in params.items():
        fetch("param", name, p.data)
        if with_optimizer and ("optimizer.m", name) in saved:
            fetch("optimizer.m", name, p.m)
            fetch("optimizer.v", name, p.v)
            p.t = int((manifest.get("optimizer") or {}).get("steps", {}).get(name, 0))
    for name, buf in buffers.items():
        fetch("buffer", name, buf)
    return manifest
