"""Checkpoint container: a JSON manifest (names, shapes, byte offsets,
step counter, config snapshot) next to one little-endian float32 blob.
Round-trips are bit-exact."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

MANIFEST_NAME = "manifest.json"
BLOB_NAME = "params.bin"
FORMAT = "tigr-checkpoint-v1"


def save_checkpoint(ckpt_dir, arrays: dict[str, np.ndarray], step: int, config: dict) -> None:
    ckpt_dir = Path(ckpt_dir)
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    offset = 0
    blobs = []
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype="<f4")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        raw = arr.tobytes()
        blobs.append(raw)
        offset += len(raw)
    manifest = {"format": FORMAT, "step": int(step), "config": config, "params": entries}
    (ckpt_dir / BLOB_NAME).write_bytes(b"".join(blobs))
    (ckpt_dir / MANIFEST_NAME).write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n")


def load_checkpoint(ckpt_dir) -> tuple[dict[str, np.ndarray], int, dict]:
    ckpt_dir = Path(ckpt_dir)
    manifest = json.loads((ckpt_dir / MANIFEST_NAME).read_text())
    if manifest.get("format") != FORMAT:
        raise ValueError(f"unrecognized checkpoint format in {ckpt_dir}")
    blob = (ckpt_dir / BLOB_NAME).read_bytes()
    arrays: dict[str, np.ndarray] = {}
    for entry in manifest["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=start).reshape(shape)
        arrays[entry["name"]] = arr.astype(np.float32)
    return arrays, manifest["step"], manifest["config"]
