"""File formats: checkpoints, PNG images, atomic text writes.

Checkpoint container (``.npz``, no pickling):

* ``__header__`` -- JSON string ``{"format": "pointerpatch-checkpoint", "version": 1,
  "kind": ..., "config": {...}, "meta": {...}}``
* one array per named parameter or buffer, keyed by its ``state_dict`` name.
"""

from __future__ import annotations

import csv
import io
import json
import os
import tempfile
from dataclasses import asdict, is_dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

CHECKPOINT_FORMAT = "pointerpatch-checkpoint"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def atomic_write_bytes(path, data: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str):
    atomic_write_bytes(path, text.encode())


def write_json(path, obj):
    atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(o):
    if is_dataclass(o):
        return asdict(o)
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, (np.ndarray, torch.Tensor)):
        return np.asarray(o).tolist()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def write_csv(path, rows, fieldnames):
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=fieldnames, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: _fmt(row.get(k)) for k in fieldnames})
    atomic_write_text(path, buf.getvalue())


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return "" if v is None else v


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _png_bytes(array_uint8) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(array_uint8).save(buf, format="PNG")
    return buf.getvalue()


def to_uint8(values) -> np.ndarray:
    return np.round(np.clip(np.asarray(values, dtype=np.float64), 0, 1) * 255).astype(np.uint8)


def write_rgb_png(path, chw):
    """``(3, h, w)`` values in [0, 1] (clamped) -> 8-bit PNG."""
    atomic_write_bytes(path, _png_bytes(to_uint8(chw).transpose(1, 2, 0)))


def write_gray_png(path, hw):
    atomic_write_bytes(path, _png_bytes(to_uint8(hw)))


def read_png(path) -> np.ndarray:
    arr = np.asarray(Image.open(path), dtype=np.float32) / 255
    return arr.transpose(2, 0, 1) if arr.ndim == 3 else arr


def save_checkpoint(path, model: torch.nn.Module, config, kind: str = "detector", meta=None):
    header = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION, "kind": kind,
              "config": asdict(config) if is_dataclass(config) else dict(config),
              "meta": meta or {}}
    arrays = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    if "__header__" in arrays:
        raise CheckpointError("parameter name collides with header key")
    buf = io.BytesIO()
    np.savez(buf, __header__=np.array(json.dumps(header, default=_json_default)), **arrays)
    atomic_write_bytes(path, buf.getvalue())


def read_checkpoint(path):
    """-> ``(header dict, {name: ndarray})``"""
    with np.load(path, allow_pickle=False) as data:
        if "__header__" not in data.files:
            raise CheckpointError(f"{path}: missing header")
        header = json.loads(str(data["__header__"]))
        arrays = {k: data[k] for k in data.files if k != "__header__"}
    if header.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {header.get('version')}")
    return header, arrays


def load_state(model: torch.nn.Module, arrays):
    state = {k: torch.from_numpy(np.array(v)) for k, v in arrays.items()}
    model.load_state_dict(state)
    return model
