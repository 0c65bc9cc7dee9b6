"""On-disk formats: raw little-endian f32 payloads with JSON sidecars.

A density map ``<stem>`` is stored as ``<stem>.json``::

    {"height": H, "width": W, "dtype": "f32",
     "byte_order": "little-endian", "layout": "row-major"}

plus ``<stem>.f32`` holding ``H * W`` float32 values.  Checkpoints are a
directory with ``meta.json`` listing named tensors, each stored under
``tensors/<name>.f32`` in the same payload encoding.
"""

from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

DTYPE = np.dtype("<f4")


def _stem(path) -> Path:
    p = Path(path)
    return p.with_suffix("") if p.suffix in (".json", ".f32") else p


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def save_density_map(path, dm: np.ndarray) -> tuple[Path, Path]:
    """Write the sidecar/payload pair for a 2-D map; returns both paths."""
    dm = np.asarray(dm)
    if dm.ndim != 2:
        raise ValueError(f"density map must be 2-D, got shape {dm.shape}")
    stem = _stem(path)
    stem.parent.mkdir(parents=True, exist_ok=True)
    meta = {
        "height": int(dm.shape[0]),
        "width": int(dm.shape[1]),
        "dtype": "f32",
        "byte_order": "little-endian",
        "layout": "row-major",
    }
    payload = stem.with_suffix(".f32")
    payload.write_bytes(np.ascontiguousarray(dm, dtype=DTYPE).tobytes(order="C"))
    sidecar = stem.with_suffix(".json")
    write_json(sidecar, meta)
    return sidecar, payload


def load_density_map(path) -> np.ndarray:
    stem = _stem(path)
    meta = json.loads(stem.with_suffix(".json").read_text())
    if meta.get("dtype") != "f32" or meta.get("byte_order") != "little-endian":
        raise ValueError(f"unsupported encoding in {stem}.json: {meta}")
    if meta.get("layout") != "row-major":
        raise ValueError(f"unsupported layout {meta.get('layout')!r}")
    h, w = int(meta["height"]), int(meta["width"])
    raw = stem.with_suffix(".f32").read_bytes()
    if len(raw) != h * w * DTYPE.itemsize:
        raise ValueError(f"{stem}.f32 has {len(raw)} bytes, expected {h * w * 4}")
    return np.frombuffer(raw, dtype=DTYPE).reshape(h, w).astype(np.float32)


def save_tensors(directory, tensors: dict[str, np.ndarray], meta: dict) -> Path:
    """Write a checkpoint directory. ``meta`` must be JSON-serialisable."""
    directory = Path(directory)
    tdir = directory / "tensors"
    tdir.mkdir(parents=True, exist_ok=True)
    entries = []
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype=DTYPE)
        fname = name.replace(os.sep, "__") + ".f32"
        (tdir / fname).write_bytes(arr.tobytes(order="C"))
        entries.append({"name": name, "shape": list(arr.shape), "file": f"tensors/{fname}"})
    write_json(directory / "meta.json", {**meta, "dtype": "f32",
                                         "byte_order": "little-endian",
                                         "layout": "row-major", "tensors": entries})
    return directory


def load_tensors(directory) -> tuple[dict[str, np.ndarray], dict]:
    directory = Path(directory)
    meta_path = directory / "meta.json"
    if not meta_path.exists():
        raise FileNotFoundError(f"checkpoint not found: {meta_path}")
    meta = json.loads(meta_path.read_text())
    tensors = {}
    for e in meta.pop("tensors"):
        raw = (directory / e["file"]).read_bytes()
        shape = tuple(e["shape"])
        if len(raw) != int(np.prod(shape, dtype=np.int64)) * DTYPE.itemsize:
            raise ValueError(f"tensor {e['name']} has wrong byte length")
        tensors[e["name"]] = np.frombuffer(raw, dtype=DTYPE).reshape(shape).astype(np.float32)
    for key in ("dtype", "byte_order", "layout"):
        meta.pop(key, None)
    return tensors, meta
