"""Checkpoint serialization and the digest binding bitstreams to weights."""

import hashlib
import json

import torch

from .model import ModelConfig, StereoCodec

FORMAT_VERSION = 1


def model_hash(model) -> bytes:
    """First 8 bytes of a sha256 over the config and every weight.

    Weights are walked in sorted name order with shape/dtype tags so the
    digest is independent of registration order but sensitive to any
    structural or numeric change.
    """
    h = hashlib.sha256()
    h.update(json.dumps(model.cfg.to_dict(), sort_keys=True).encode())
    for name, t in sorted(model.state_dict().items()):
        h.update(name.encode())
        h.update(repr(tuple(t.shape)).encode())
        h.update(str(t.dtype).encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.digest()[:8]


def save_checkpoint(path, model, optimizer=None, extra=None):
    payload = {
        "format": FORMAT_VERSION,
        "config": model.cfg.to_dict(),
        "state": {k: v.cpu() for k, v in model.state_dict().items()},
        "extra": dict(extra or {}),
    }
    if optimizer is not None:
        payload["optim"] = optimizer.state_dict()
    torch.save(payload, path)


def load_checkpoint(path, device="cpu"):
    """Rebuild the model from a saved payload; returns (model, payload)."""
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format") != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format {payload.get('format')!r}")
    cfg = ModelConfig(**payload["config"])
    model = StereoCodec(cfg)
    model.load_state_dict(payload["state"], strict=True)
    return model.to(device), payload
