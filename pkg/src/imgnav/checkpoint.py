"""Versioned ``.npz`` parameter dumps shared by both learned modules."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from . import nn
from .errors import ConfigurationError

FORMAT_VERSION = 1


def save_checkpoint(path, params: nn.Params, kind: str, meta: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = json.dumps({"format_version": FORMAT_VERSION, "kind": kind, "meta": meta or {}}, sort_keys=True)
    with path.open("wb") as fh:
        np.savez(fh, __header__=np.array(header), **{k: params[k] for k in sorted(params)})
    return path


def load_checkpoint(path, kind: str) -> tuple[nn.Params, dict]:
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"missing checkpoint {path}")
    with np.load(path, allow_pickle=False) as data:
        header = json.loads(str(data["__header__"]))
        if header.get("format_version") != FORMAT_VERSION:
            raise ConfigurationError(f"{path}: unsupported checkpoint version {header.get('format_version')}")
        if header.get("kind") != kind:
            raise ConfigurationError(f"{path}: expected a {kind} checkpoint, found {header.get('kind')}")
        params = {k: data[k].astype(float) for k in data.files if k != "__header__"}
    return params, header["meta"]
