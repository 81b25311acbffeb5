"""Versioned checkpoint payloads: named tensors plus the config that built them."""
from __future__ import annotations

from dataclasses import asdict
from pathlib import Path
from typing import Any

import torch

FORMAT_TAG = "jointgan-ckpt-v1"


def save_payload(path: str | Path, kind: str, config, state: dict[str, Any], **extra) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": FORMAT_TAG,
        "kind": kind,
        "config": asdict(config) if config is not None else None,
        "state": state,
    }
    payload.update(extra)
    torch.save(payload, path)
    return path


def load_payload(path: str | Path, kind: str) -> dict[str, Any]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format") != FORMAT_TAG:
        raise ValueError(
            f"{path}: unsupported checkpoint format {payload.get('format')!r}, "
            f"expected {FORMAT_TAG!r}"
        )
    if payload.get("kind") != kind:
        raise ValueError(f"{path}: checkpoint kind {payload.get('kind')!r}, expected {kind!r}")
    return payload
