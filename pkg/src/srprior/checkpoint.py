"""Self-describing checkpoints and parameter checksums.

A checkpoint is a torch-serialized dict::

    format_version, kind, config, layer_specs, permutation_seeds,
    state_dict, checksum, extra

Loading rebuilds the model from ``config`` and refuses files whose layer
layout or permutation seeds disagree with the rebuilt model, so the inverse
pass is reconstructed exactly.
"""
from __future__ import annotations

import hashlib
import json
from pathlib import Path

import torch
from torch import nn

from .fixed_scale import FixedScaleModel
from .flow_core import layer_specs, permutation_seeds
from .latent_module import LatentModule
from .patch_flow import PatchFlowModel

__all__ = ["FORMAT_VERSION", "CheckpointError", "state_checksum", "file_checksum", "content_hash",
           "save_checkpoint", "load_checkpoint", "load_model"]

FORMAT_VERSION = 1

_KINDS = {"fixed": FixedScaleModel, "patch": PatchFlowModel, "latent": LatentModule}


class CheckpointError(ValueError):
    pass


def state_checksum(module: nn.Module) -> str:
    """sha256 over parameter and buffer names and raw bytes, in key order."""
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(str(t.dtype).encode())
        h.update(str(tuple(t.shape)).encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def file_checksum(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def content_hash(path) -> str:
    """sha256 of a checkpoint's logical content (kind, config, layout,
    parameters). Unlike :func:`file_checksum` it ignores the random
    serialization id torch writes into every archive, so re-saving an
    unchanged model gives the same hash."""
    payload = load_checkpoint(path)
    h = hashlib.sha256()
    meta = {k: payload[k] for k in ("format_version", "kind", "config", "layer_specs", "permutation_seeds")}
    h.update(json.dumps(meta, sort_keys=True, default=str).encode())
    for name, t in sorted(payload["state_dict"].items()):
        h.update(name.encode())
        h.update(t.contiguous().numpy().tobytes())
    return h.hexdigest()


def _kind_of(model: nn.Module) -> str:
    for k, cls in _KINDS.items():
        if isinstance(model, cls):
            return k
    raise CheckpointError(f"cannot checkpoint {type(model).__name__}")


def save_checkpoint(path, model: nn.Module, extra: dict | None = None) -> str:
    """Write ``model`` to ``path``; returns the parameter checksum."""
    checksum = state_checksum(model)
    payload = {
        "format_version": FORMAT_VERSION,
        "kind": _kind_of(model),
        "config": dict(model.config),
        "layer_specs": layer_specs(model),
        "permutation_seeds": permutation_seeds(model),
        "state_dict": {k: v.detach().cpu().clone() for k, v in model.state_dict().items()},
        "checksum": checksum,
        "extra": extra or {},
    }
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)
    return checksum


def load_checkpoint(path) -> dict:
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:  # corrupt or foreign file
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint format")
    if payload.get("kind") not in _KINDS:
        raise CheckpointError(f"{path}: unknown model kind {payload.get('kind')!r}")
    return payload


def load_model(path, expect: str | None = None) -> nn.Module:
    """Rebuild and return the model stored at ``path`` in eval mode."""
    payload = load_checkpoint(path)
    kind = payload["kind"]
    if expect is not None and kind != expect and not (expect == "flow" and kind in ("fixed", "patch")):
        raise CheckpointError(f"{path}: expected a {expect} checkpoint, found {kind}")
    model = _KINDS[kind](**payload["config"])
    if layer_specs(model) != payload["layer_specs"]:
        raise CheckpointError(f"{path}: layer layout does not match its config")
    if permutation_seeds(model) != payload["permutation_seeds"]:
        raise CheckpointError(f"{path}: permutation seeds do not match")
    model.load_state_dict(payload["state_dict"])
    if state_checksum(model) != payload["checksum"]:
        raise CheckpointError(f"{path}: parameter checksum mismatch")
    model.eval()
    return model
