"""Checkpoint directories: one flat little-endian blob plus a JSON manifest."""

from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path
from typing import Any, Mapping

import numpy as np

BLOB = "tensors.bin"
MANIFEST = "manifest.json"
_DTYPES = {"float32": "<f4", "float64": "<f8"}


def atomic_write_bytes(path: Path, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: Path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def dump_json(obj: Any) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n"


def save_checkpoint(directory: Path, tensors: Mapping[str, np.ndarray],
                    meta: Mapping[str, Any] | None = None,
                    flags: Mapping[str, Mapping[str, Any]] | None = None) -> Path:
    """Write ``tensors`` to ``directory``.

    Float32 arrays are stored as ``<f4``; float64 arrays keep ``<f8`` so a
    64-bit run reloads bit-identically.  ``flags`` attaches per-tensor
    attributes (e.g. ``{"head.radial1.mu_w": {"radial": True}}``).
    """
    directory = Path(directory)
    entries = []
    chunks = []
    offset = 0
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        dtype = "float64" if arr.dtype == np.float64 else "float32"
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[dtype]).tobytes()
        entry = {"name": name, "shape": list(arr.shape), "dtype": dtype, "offset": offset,
                 "nbytes": len(raw)}
        if flags and name in flags:
            entry.update(flags[name])
        entries.append(entry)
        chunks.append(raw)
        offset += len(raw)
    atomic_write_bytes(directory / BLOB, b"".join(chunks))
    manifest = {"tensors": entries, "meta": dict(meta or {})}
    atomic_write_text(directory / MANIFEST, dump_json(manifest))
    return directory


def load_checkpoint(directory: Path) -> tuple[dict[str, np.ndarray], dict[str, Any], list[dict]]:
    """Return ``(tensors, meta, manifest entries)``."""
    directory = Path(directory)
    mpath = directory / MANIFEST
    if not mpath.exists():
        raise FileNotFoundError(f"checkpoint manifest missing: {mpath}")
    manifest = json.loads(mpath.read_text())
    blob = (directory / BLOB).read_bytes()
    tensors = {}
    for e in manifest["tensors"]:
        dt = np.dtype(_DTYPES[e["dtype"]])
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        arr = np.frombuffer(blob, dtype=dt, count=count, offset=e["offset"])
        tensors[e["name"]] = arr.reshape(e["shape"]).astype(dt.newbyteorder("="), copy=True)
    return tensors, manifest.get("meta", {}), manifest["tensors"]
