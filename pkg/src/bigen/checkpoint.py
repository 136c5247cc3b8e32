"""Flat checkpoint archive.

A checkpoint is a numpy .npz (zip) archive readable without this package:
every parameter is stored under ``param::<state_dict_name>`` as a raw array,
and ``__meta__`` holds one JSON document with the model kind, its full config,
the config hash, and the training provenance (stage, step). Loading validates
the hash before any state is touched, so a mismatching or truncated archive
never produces a partially loaded model.
"""

from __future__ import annotations

import io
import json
import os
import tempfile
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from .model import ModelConfig, UnifiedModel
from .scorer import ScorerConfig, ScorerModel

_PARAM = "param::"


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(path: Path, module: torch.nn.Module, kind: str,
                    config, extra_meta: dict | None = None) -> None:
    """Atomically write `module`'s parameters and metadata to `path`."""
    path = Path(path)
    meta = {
        "kind": kind,
        "config": asdict(config),
        "config_hash": config.hash(),
        **(extra_meta or {}),
    }
    arrays = {_PARAM + name: tensor.detach().cpu().numpy()
              for name, tensor in module.state_dict().items()}
    buf = io.BytesIO()
    np.savez(buf, __meta__=np.frombuffer(json.dumps(meta, sort_keys=True).encode(),
                                         dtype=np.uint8), **arrays)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(buf.getvalue())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_checkpoint(path: Path) -> tuple[dict, dict]:
    """Return (meta, state arrays); raises CheckpointError on a bad archive."""
    try:
        with np.load(path) as npz:
            data = {k: npz[k] for k in npz.files}
    except Exception as exc:
        raise CheckpointError(f"{path}: unreadable checkpoint ({exc})") from exc
    if "__meta__" not in data:
        raise CheckpointError(f"{path}: missing metadata block")
    meta = json.loads(bytes(data.pop("__meta__")).decode())
    state = {k[len(_PARAM):]: v for k, v in data.items() if k.startswith(_PARAM)}
    return meta, state


def _check(meta: dict, path, expected_kind: str | None, expected_hash: str | None):
    if expected_kind is not None and meta.get("kind") != expected_kind:
        raise CheckpointError(
            f"{path}: checkpoint kind {meta.get('kind')!r} does not match "
            f"expected {expected_kind!r}; refusing to load")
    if expected_hash is not None and meta.get("config_hash") != expected_hash:
        raise CheckpointError(
            f"{path}: config hash mismatch (checkpoint {meta.get('config_hash')}, "
            f"expected {expected_hash}); refusing to load")


def load_model(path: Path, expected_hash: str | None = None) -> tuple[UnifiedModel, dict]:
    meta, state = read_checkpoint(path)
    _check(meta, path, "unified_model", expected_hash)
    config = ModelConfig(**meta["config"])
    model = UnifiedModel(config)
    model.load_state_dict({k: torch.as_tensor(v) for k, v in state.items()})
    return model, meta


def load_scorer(path: Path, expected_hash: str | None = None) -> tuple[ScorerModel, dict]:
    meta, state = read_checkpoint(path)
    _check(meta, path, "scorer", expected_hash)
    config = ScorerConfig(**meta["config"])
    scorer = ScorerModel(config)
    scorer.load_state_dict({k: torch.as_tensor(v) for k, v in state.items()})
    scorer.eval()
    return scorer, meta
