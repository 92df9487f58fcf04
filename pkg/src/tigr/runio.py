"""File formats and run bookkeeping: dataset CSV writers, grid-spec TOML,
the embedding binary (magic TIGREMB1), and per-command run manifests."""

from __future__ import annotations

import csv
import hashlib
import json
import struct
import subprocess
import sys
import time
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .data import GridSpec, RawTrajectory, RoadNetwork, RoadTrajectory, wkt_linestring

EMB_MAGIC = b"TIGREMB1"


# ---------------------------------------------------------------------------
# dataset files
# ---------------------------------------------------------------------------


def write_network_csvs(net: RoadNetwork, segments_path, edges_path) -> None:
    classes = []
    class_cols = [n for n in net.feature_names if n.startswith("class_")]
    for row in net.features:
        onehot = row[2:2 + len(class_cols)]
        classes.append(class_cols[int(np.argmax(onehot))][len("class_"):])
    with open(segments_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["segment_id", "length_m", "speed_kmh", "class", "wkt_polyline"])
        for sid in range(net.n_segments):
            w.writerow([sid, repr(float(net.lengths_m[sid])),
                        repr(float(net.speed_limits_kmh[sid])), classes[sid],
                        wkt_linestring(net.geometry[sid])])
    with open(edges_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["from_segment", "to_segment"])
        for sid in range(net.n_segments):
            for nxt in net.adjacency[sid]:
                w.writerow([sid, int(nxt)])


def write_raw_csv(trajs: list[RawTrajectory], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["traj_id", "point_idx", "lon", "lat", "timestamp"])
        for traj in trajs:
            for i, (x, y, t) in enumerate(traj.points):
                w.writerow([traj.id, i, repr(float(x)), repr(float(y)), repr(float(t))])


def write_matched_csv(trajs: list[RoadTrajectory], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["traj_id", "point_idx", "segment_id", "timestamp"])
        for traj in trajs:
            for i, (seg, t) in enumerate(zip(traj.segments, traj.times)):
                w.writerow([traj.id, i, int(seg), repr(float(t))])


def write_grid_spec_toml(spec: GridSpec, path) -> None:
    lines = [
        "[grid_spec]",
        f"min_x = {spec.min_x!r}",
        f"min_y = {spec.min_y!r}",
        f"max_x = {spec.max_x!r}",
        f"max_y = {spec.max_y!r}",
        f"cell_size_m = {spec.cell_size_m!r}",
        f"# derived: M = {spec.M}, N = {spec.N}",
        "",
    ]
    Path(path).write_text("\n".join(lines))


def read_grid_spec_toml(path) -> GridSpec:
    with open(path, "rb") as fh:
        doc = tomllib.load(fh)
    g = doc["grid_spec"]
    return GridSpec(min_x=g["min_x"], min_y=g["min_y"], max_x=g["max_x"], max_y=g["max_y"],
                    cell_size_m=g["cell_size_m"])


# ---------------------------------------------------------------------------
# embedding binary
# ---------------------------------------------------------------------------


def write_embeddings(path, ids: list[str], mat: np.ndarray) -> None:
    """magic TIGREMB1, little-endian u32 count and dim, count*dim float32
    values, then count newline-terminated UTF-8 ids."""
    mat = np.ascontiguousarray(mat, dtype="<f4")
    if mat.ndim != 2 or mat.shape[0] != len(ids):
        raise ValueError(f"embedding matrix {mat.shape} does not match {len(ids)} ids")
    with open(path, "wb") as fh:
        fh.write(EMB_MAGIC)
        fh.write(struct.pack("<II", mat.shape[0], mat.shape[1]))
        fh.write(mat.tobytes())
        for tid in ids:
            fh.write(tid.encode("utf-8") + b"\n")


def read_embeddings(path) -> tuple[list[str], np.ndarray]:
    blob = Path(path).read_bytes()
    if blob[:8] != EMB_MAGIC:
        raise ValueError(f"{path}: not an embedding file (bad magic)")
    count, dim = struct.unpack("<II", blob[8:16])
    body = 16 + count * dim * 4
    mat = np.frombuffer(blob[16:body], dtype="<f4").reshape(count, dim).astype(np.float32)
    ids = blob[body:].decode("utf-8").splitlines()
    if len(ids) != count:
        raise ValueError(f"{path}: id section has {len(ids)} entries, expected {count}")
    return ids, mat


# ---------------------------------------------------------------------------
# run manifests
# ---------------------------------------------------------------------------


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def git_describe() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"],
                             capture_output=True, text=True, timeout=10)
        if out.returncode == 0:
            return out.stdout.strip()
    except OSError:
        pass
    return "unknown"


class RunClock:
    def __init__(self):
        self.t0 = time.monotonic()

    def seconds(self) -> float:
        return time.monotonic() - self.t0


def write_run_manifest(out_dir, command: str, cfg_hash: str, seed: int,
                       inputs: list, outputs: list, clock: RunClock) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "config_hash": cfg_hash,
        "seed": seed,
        "git_describe": git_describe(),
        "inputs": {str(p): sha256_file(p) for p in inputs},
        "outputs": [str(p) for p in outputs],
        "wall_clock_s": round(clock.seconds(), 3),
    }
    path = out_dir / "run_manifest.json"
    path.write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n")
    return path
