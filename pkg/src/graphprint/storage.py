"""File formats: datasets, checkpoints, metrics documents, epoch logs.

Datasets are UTF-8 line-delimited JSON records
``{"identity_id": int, "impression_id": int, "minutiae": [[x, y, d], ...]}``.
Checkpoints and metrics are single JSON documents with sorted keys. Floats
are serialized with Python's shortest-round-trip repr, so save/load is
bit-exact, and all writes go through a temp-file rename, so readers never
see a partial file.
"""

from __future__ import annotations

import json
import os
import tempfile
from typing import Any

import numpy as np

from .config import RunConfig, run_config_from_dict
from .errors import ValidationError
from .graphs import Minutia
from .model import ModelParams
from .synth import FingerprintRecord

CHECKPOINT_VERSION = 1


def atomic_write_text(path: str, text: str) -> None:
    directory = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix="~")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as handle:
            handle.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# -- datasets -----------------------------------------------------------------

def dataset_lines(records: list[FingerprintRecord]) -> str:
    lines = []
    for rec in records:
        doc = {
            "identity_id": rec.identity_id,
            "impression_id": rec.impression_id,
            "minutiae": [m.as_triple() for m in rec.minutiae],
        }
        lines.append(json.dumps(doc))
    return "\n".join(lines) + "\n" if lines else ""


def write_dataset(records: list[FingerprintRecord], path: str) -> None:
    atomic_write_text(path, dataset_lines(records))


def read_dataset(path: str) -> list[FingerprintRecord]:
    records: list[FingerprintRecord] = []
    with open(path, encoding="utf-8") as handle:
        for line_no, line in enumerate(handle, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                doc = json.loads(line)
                minutiae = [Minutia(float(x), float(y), float(d))
                            for x, y, d in doc["minutiae"]]
                records.append(FingerprintRecord(
                    int(doc["identity_id"]), int(doc["impression_id"]), minutiae))
            except (KeyError, TypeError, ValueError) as exc:
                raise ValidationError(
                    f"{path}:{line_no}: malformed dataset record: {exc}") from exc
    if not records:
        raise ValidationError(f"{path}: dataset is empty")
    return records


# -- checkpoints ---------------------------------------------------------------

def _pack_array(arr: np.ndarray) -> dict:
    return {"shape": list(arr.shape), "values": arr.ravel().tolist()}


def _unpack_array(doc: dict) -> np.ndarray:
    return np.array(doc["values"], dtype=np.float64).reshape(doc["shape"])


def checkpoint_document(cfg: RunConfig, params: ModelParams,
                        optimizer_state: dict | None = None,
                        meta: dict | None = None) -> dict:
    doc: dict[str, Any] = {
        "format_version": CHECKPOINT_VERSION,
        "config": cfg.to_dict(),
        "meta": meta or {},
        "params": {name: _pack_array(t.data)
                   for name, t in params.named_parameters().items()},
        "running_stats": {name: _pack_array(arr)
                          for name, arr in params.named_stats().items()},
    }
    if optimizer_state is not None:
        doc["optimizer"] = {
            "step_count": optimizer_state["step_count"],
            "m": {k: _pack_array(v) for k, v in optimizer_state["m"].items()},
            "v": {k: _pack_array(v) for k, v in optimizer_state["v"].items()},
        }
    return doc


def save_checkpoint(path: str, cfg: RunConfig, params: ModelParams,
                    optimizer_state: dict | None = None,
                    meta: dict | None = None) -> None:
    doc = checkpoint_document(cfg, params, optimizer_state, meta)
    atomic_write_text(path, json.dumps(doc, sort_keys=True))


def load_checkpoint(path: str) -> tuple[RunConfig, ModelParams, dict | None, dict]:
    with open(path, encoding="utf-8") as handle:
        doc = json.load(handle)
    version = doc.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise ValidationError(
            f"checkpoint format_version {version!r} unsupported "
            f"(expected {CHECKPOINT_VERSION})")
    cfg = run_config_from_dict(doc["config"])
    params = ModelParams.init(cfg.model, seed=0)
    named = params.named_parameters()
    stored = doc["params"]
    if set(named) != set(stored):
        raise ValidationError("checkpoint parameter names do not match the config")
    for name, tensor in named.items():
        arr = _unpack_array(stored[name])
        if arr.shape != tensor.data.shape:
            raise ValidationError(
                f"checkpoint array {name} has shape {arr.shape}, "
                f"expected {tensor.data.shape}")
        tensor.data = arr
    params.load_stats({name: _unpack_array(val)
                       for name, val in doc["running_stats"].items()})
    optimizer_state = None
    if "optimizer" in doc:
        opt = doc["optimizer"]
        optimizer_state = {
            "step_count": int(opt["step_count"]),
            "m": {k: _unpack_array(v) for k, v in opt["m"].items()},
            "v": {k: _unpack_array(v) for k, v in opt["v"].items()},
        }
    return cfg, params, optimizer_state, doc.get("meta", {})


# -- metrics and logs ------------------------------------------------------------

def write_metrics(path: str, doc: dict) -> None:
    atomic_write_text(path, json.dumps(doc, sort_keys=True, indent=2) + "\n")


def write_epoch_log(path: str, records: list[dict]) -> None:
    text = "".join(json.dumps(rec) + "\n" for rec in records)
    atomic_write_text(path, text)


def read_json(path: str) -> dict:
    with open(path, encoding="utf-8") as handle:
        return json.load(handle)
