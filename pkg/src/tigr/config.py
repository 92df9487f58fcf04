"""TOML run configuration: declared defaults, strict key validation, and a
stable content hash recorded in every output."""

from __future__ import annotations

import copy
import hashlib
import json
import sys

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .data import ConfigError
from .masking import MaskingStrategy, ViewConfig

DEFAULTS: dict = {
    "data": {
        "min_len": 20,
        "max_len": 200,
        "split": [0.8, 0.1, 0.1],
    },
    "synth": {
        "lattice": 5,
        "segment_length_m": 200.0,
        "trajectories": 5000,
        "min_road_len": 12,
        "max_road_len": 40,
        "points_per_segment": 3,
        "gps_noise_m": 4.0,
        "origin_lon": -8.61,
        "origin_lat": 41.15,
        "box_margin_m": 60.0,
        "start_window_days": 7,
        "rush_hours": [8, 17],
        "rush_factor": 0.5,
        "shoulder_hours": [7, 9, 16, 18],
        "shoulder_factor": 0.75,
    },
    "grid": {
        "cell_size_m": 100.0,
    },
    "model": {
        "d_g": 256,
        "d_r": 128,
        "d_st": 128,
        "d_proj": 128,
        "n_layers": 2,
        "h_enc": 8,
        "h_lma": 4,
        "q": 32,
        "mu": 0.99,
        "dropout": 0.1,
        "ffn_ratio": 4,
    },
    "masking": {
        "view1": [{"kind": "tc", "ratio": 0.3}, {"kind": "cm", "ratio": 0.3}],
        "view2": [{"kind": "rm", "ratio": 0.3}, {"kind": "tc", "ratio": 0.3},
                  {"kind": "cm", "ratio": 0.3}],
        "min_keep": 2,
    },
    "train": {
        "lr": 0.001,
        "batch": 512,
        "epochs": 10,
        "tau": 0.05,
        "lambda": 0.5,
        "queue": 2048,
        "seed": 7,
    },
    "eval": {
        "k_neg": 10000,
        "queries": 10000,
        "kneg_sweep": [100, 500, 1000, 2000],
        "head_epochs": 30,
        "head_lr": 0.001,
        "head_batch": 128,
        "geojson_k": 500,
        "seed": 7,
    },
    "ablation": {
        "branches": "g+r+st",
        "no_inter": False,
        "no_lma": False,
        "no_rope": False,
        "seeds": [1],
    },
}


def _check_keys(user: dict, schema: dict, path: str = "") -> None:
    for key, value in user.items():
        here = f"{path}.{key}" if path else key
        if key not in schema:
            raise ConfigError(f"unknown config key {here!r}")
        ref = schema[key]
        if isinstance(ref, dict) and not isinstance(value, dict):
            raise ConfigError(f"config key {here!r} must be a table")
        if isinstance(ref, dict):
            _check_keys(value, ref, here)


def _merge(base: dict, user: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in user.items():
        if isinstance(value, dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def load_config(path=None) -> dict:
    """Resolved configuration: declared defaults overlaid with the TOML
    file. Unknown keys are rejected."""
    user: dict = {}
    if path is not None:
        with open(path, "rb") as fh:
            user = tomllib.load(fh)
    _check_keys(user, DEFAULTS)
    cfg = _merge(DEFAULTS, user)
    if abs(sum(cfg["data"]["split"]) - 1.0) > 1e-9:
        raise ConfigError("data.split fractions must sum to 1")
    return cfg


def config_hash(cfg: dict) -> str:
    canonical = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def view_config(entries: list[dict], min_keep: int) -> ViewConfig:
    return ViewConfig(tuple(MaskingStrategy(e["kind"], e["ratio"]) for e in entries),
                      min_keep=min_keep)


def describe_defaults() -> str:
    """Flat key = default listing for --help."""
    lines = []

    def walk(d: dict, prefix: str):
        for key, value in d.items():
            if isinstance(value, dict):
                walk(value, f"{prefix}{key}.")
            else:
                lines.append(f"  {prefix}{key} = {json.dumps(value)}")

    walk(DEFAULTS, "")
    return "config keys and defaults:\n" + "\n".join(lines)
