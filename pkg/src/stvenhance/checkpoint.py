"""Named-tensor checkpoint format.

A checkpoint is a directory::

    manifest.json   {"format": "stvenhance.tensors", "version": 1, "meta": {...},
                     "tensors": [{"name", "shape", "dtype", "offset", "nbytes", "trainable"}, ...]}
    tensors.bin     concatenated little-endian float32 arrays, in manifest order

Names are namespaced: ``backbone.*``, ``controlnet.*`` and ``optim.*``.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

FORMAT = "stvenhance.tensors"
VERSION = 1
MANIFEST = "manifest.json"
DATA = "tensors.bin"
_DTYPE = np.dtype("<f4")


class CheckpointError(ValueError):
    pass


def save_tensors(path, tensors: dict[str, np.ndarray], meta: dict | None = None,
                 trainable: dict[str, bool] | None = None) -> Path:
    d = Path(path)
    d.mkdir(parents=True, exist_ok=True)
    trainable = trainable or {}
    entries, offset = [], 0
    with open(d / DATA, "wb") as fh:
        for name, arr in tensors.items():
            buf = np.ascontiguousarray(arr, dtype=_DTYPE).tobytes()
            fh.write(buf)
            entries.append({"name": name, "shape": list(np.shape(arr)), "dtype": "float32",
                            "offset": offset, "nbytes": len(buf), "trainable": bool(trainable.get(name, False))})
            offset += len(buf)
    manifest = {"format": FORMAT, "version": VERSION, "meta": meta or {}, "tensors": entries}
    (d / MANIFEST).write_text(json.dumps(manifest, indent=1), encoding="utf-8")
    return d


def load_tensors(path) -> tuple[dict[str, np.ndarray], dict, dict[str, bool]]:
    d = Path(path)
    if not (d / MANIFEST).exists() or not (d / DATA).exists():
        raise CheckpointError(f"{d} is not a checkpoint directory")
    manifest = json.loads((d / MANIFEST).read_text(encoding="utf-8"))
    if manifest.get("format") != FORMAT or manifest.get("version") != VERSION:
        raise CheckpointError(f"unsupported checkpoint format {manifest.get('format')!r} v{manifest.get('version')}")
    raw = (d / DATA).read_bytes()
    tensors, flags = {}, {}
    for e in manifest["tensors"]:
        if e["dtype"] != "float32":
            raise CheckpointError(f"{e['name']}: unsupported dtype {e['dtype']}")
        count = int(np.prod(e["shape"], dtype=np.int64))
        if count * _DTYPE.itemsize != e["nbytes"]:
            raise CheckpointError(f"{e['name']}: shape {e['shape']} does not match {e['nbytes']} bytes")
        end = e["offset"] + e["nbytes"]
        if end > len(raw):
            raise CheckpointError(f"{e['name']}: data truncated")
        tensors[e["name"]] = np.frombuffer(raw[e["offset"]:end], dtype=_DTYPE).reshape(e["shape"]).copy()
        flags[e["name"]] = e["trainable"]
    return tensors, manifest["meta"], flags
