"""Canonical-JSON checkpoints.

Floats are written with ``repr`` (shortest round-trip form), so loading gives
bit-identical arrays, signed zeros included. Keys are sorted, which makes equal
states serialize to equal bytes.
"""
from __future__ import annotations

import json
import os
import tempfile
from typing import Optional

import numpy as np

from .baseline import LoraAdapter
from .core import SoraAdapter
from .errors import CheckpointError
from .numerics import rng_from_state, rng_state
from .trainer import TinyModel, TrainConfig, TrainState

FORMAT = "sora-checkpoint"
VERSION = 1
KINDS = ("full", "pruned")


def _arr(a) -> dict:
    a = np.asarray(a, dtype=np.float64)
    return {"shape": list(a.shape), "data": [float(v) for v in a.ravel()]}


def _unarr(d) -> np.ndarray:
    try:
        return np.array(d["data"], dtype=np.float64).reshape(d["shape"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"malformed array record: {exc}") from exc


def dumps(obj) -> bytes:
    return (json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False) + "\n").encode()


def write_atomic(path, data: bytes) -> None:
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _layer_record(layer) -> dict:
    rec = {"label": list(layer.label), "w0": _arr(layer.w0), "wd": _arr(layer.wd), "wu": _arr(layer.wu)}
    if isinstance(layer, SoraAdapter):
        rec["type"] = "sora"
        rec["gate"] = _arr(layer.gate)
    else:
        rec["type"] = "lora"
    return rec


def _layer_from(rec):
    label = tuple(rec["label"])
    if rec["type"] == "sora":
        return SoraAdapter(_unarr(rec["w0"]), _unarr(rec["wd"]), _unarr(rec["wu"]), _unarr(rec["gate"]), label)
    if rec["type"] == "lora":
        return LoraAdapter(_unarr(rec["w0"]), _unarr(rec["wd"]), _unarr(rec["wu"]), label)
    raise CheckpointError(f"unknown layer type {rec['type']!r}")


def model_record(model: TinyModel) -> dict:
    return {
        "task": model.task,
        "layers": [_layer_record(l) for l in model.layers],
        "head": None if model.head is None else _arr(model.head),
    }


def model_from_record(rec) -> TinyModel:
    head = None if rec.get("head") is None else _unarr(rec["head"])
    return TinyModel([_layer_from(l) for l in rec["layers"]], rec["task"], head)


def checkpoint_record(model: TinyModel, config: Optional[TrainConfig] = None,
                      state: Optional[TrainState] = None, extra: Optional[dict] = None) -> dict:
    rec = {"format": FORMAT, "version": VERSION, "kind": "full", "model": model_record(model),
           "config": None if config is None else config.to_dict(), "state": None}
    if state is not None:
        rec["state"] = {
            "step": state.step,
            "epoch": state.epoch,
            "converged": state.converged,
            "rng": rng_state(state.rng),
            "m": {k: _arr(v) for k, v in state.m.items()},
            "v": {k: _arr(v) for k, v in state.v.items()},
        }
    if extra:
        rec["extra"] = extra
    return rec


def _check_header(rec, kind):
    if not isinstance(rec, dict) or rec.get("format") != FORMAT:
        raise CheckpointError("not a sora checkpoint")
    if rec.get("version") != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {rec.get('version')!r}")
    if rec.get("kind") != kind:
        raise CheckpointError(f"expected a {kind} checkpoint, found {rec.get('kind')!r}")


def checkpoint_from_record(rec):
    """Return ``(model, config, state)``; the last two may be None."""
    _check_header(rec, "full")
    try:
        model = model_from_record(rec["model"])
        config = None if rec.get("config") is None else TrainConfig(**rec["config"])
        state = None
        if rec.get("state") is not None:
            s = rec["state"]
            state = TrainState(rng_from_state(s["rng"]), s["step"], s["epoch"],
                               {k: _unarr(v) for k, v in s["m"].items()},
                               {k: _unarr(v) for k, v in s["v"].items()}, s.get("converged"))
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"malformed checkpoint: {exc}") from exc
    return model, config, state


def save_checkpoint(path, model, config=None, state=None, extra=None) -> None:
    write_atomic(path, dumps(checkpoint_record(model, config, state, extra)))


def _read(path):
    try:
        with open(path, "rb") as fh:
            return json.loads(fh.read())
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc


def load_checkpoint(path):
    return checkpoint_from_record(_read(path))


def save_pruned(path, modules: list) -> None:
    rec = {"format": FORMAT, "version": VERSION, "kind": "pruned", "modules": [m.to_record() for m in modules]}
    write_atomic(path, dumps(rec))


def load_pruned(path) -> list:
    from .prune import PrunedAdapter

    rec = _read(path)
    _check_header(rec, "pruned")
    return [PrunedAdapter.from_record(m) for m in rec["modules"]]


def peek_kind(path) -> str:
    rec = _read(path)
    if not isinstance(rec, dict) or rec.get("format") != FORMAT:
        raise CheckpointError("not a sora checkpoint")
    return rec.get("kind")


array_record = _arr
array_from_record = _unarr
