"""Synthetic road network and trajectory generator.

Builds a g x g Manhattan lattice (every undirected street is a pair of
directed segments) and turn-biased random walks over it. Per-token
timestamps advance by segment length over an effective speed that dips
during two rush hours, so travel times carry a learnable daily pattern and
the traffic matrix sees real hour-of-day structure.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Rng
from .data import (
    ConfigError,
    EARTH_M_PER_DEG,
    GridSpec,
    RawTrajectory,
    RoadNetwork,
    RoadTrajectory,
    ROAD_CLASSES,
)

# Monday 2024-01-01T00:00:00Z; start times land in the week after it
WEEK_START_UNIX = 1704067200

STREET_CLASSES = (("residential", 30.0), ("secondary", 50.0), ("primary", 70.0))


@dataclass
class SynthConfig:
    lattice: int = 5                      # g x g intersections
    segment_length_m: float = 200.0
    trajectories: int = 5000
    min_road_len: int = 12                # tokens per walk
    max_road_len: int = 40
    points_per_segment: int = 3
    gps_noise_m: float = 4.0
    origin_lon: float = -8.61
    origin_lat: float = 41.15
    box_margin_m: float = 60.0
    cell_size_m: float = 100.0
    start_window_days: int = 7
    rush_hour_factors: dict[int, float] = field(default_factory=lambda: {
        7: 0.75, 8: 0.5, 9: 0.75, 16: 0.75, 17: 0.5, 18: 0.75,
    })
    straight_weight: float = 3.0
    turn_weight: float = 1.0
    uturn_weight: float = 0.05

    def validate(self) -> None:
        if self.lattice < 2:
            raise ConfigError("synth.lattice must be >= 2")
        if self.trajectories < 1:
            raise ConfigError("synth.trajectories must be >= 1")
        if not 2 <= self.min_road_len <= self.max_road_len:
            raise ConfigError("synth road length range invalid")
        if self.points_per_segment < 1:
            raise ConfigError("synth.points_per_segment must be >= 1")


def hour_factor(cfg: SynthConfig, t: float) -> float:
    return cfg.rush_hour_factors.get(int(t // 3600) % 24, 1.0)


def build_lattice(cfg: SynthConfig, rng: Rng) -> RoadNetwork:
    """g x g lattice: 2*g*(g-1) undirected streets, doubled into directed
    segments. Both directions of a street share class and base speed."""
    g = cfg.lattice
    s = cfg.segment_length_m
    m_per_deg_lon = EARTH_M_PER_DEG * math.cos(math.radians(cfg.origin_lat))

    def node_lonlat(i: int, j: int) -> tuple[float, float]:
        return (cfg.origin_lon + j * s / m_per_deg_lon,
                cfg.origin_lat + i * s / EARTH_M_PER_DEG)

    streets: list[tuple[tuple[int, int], tuple[int, int]]] = []
    for i in range(g):
        for j in range(g - 1):
            streets.append(((i, j), (i, j + 1)))
    for i in range(g - 1):
        for j in range(g):
            streets.append(((i, j), (i + 1, j)))

    cls_idx = rng.child("street-class").integers(0, len(STREET_CLASSES), size=len(streets))
    seg_from: list[tuple[int, int]] = []
    seg_to: list[tuple[int, int]] = []
    classes: list[str] = []
    speeds: list[float] = []
    for k, (a, b) in enumerate(streets):
        name, speed = STREET_CLASSES[int(cls_idx[k])]
        for u, v in ((a, b), (b, a)):
            seg_from.append(u)
            seg_to.append(v)
            classes.append(name)
            speeds.append(speed)

    n = len(seg_from)
    departs: dict[tuple[int, int], list[int]] = {}
    for sid in range(n):
        departs.setdefault(seg_from[sid], []).append(sid)
    adjacency = [np.array(sorted(departs.get(seg_to[sid], [])), dtype=np.int64) for sid in range(n)]

    geometry = [np.array([node_lonlat(*seg_from[sid]), node_lonlat(*seg_to[sid])]) for sid in range(n)]
    lengths = np.full(n, s, dtype=np.float64)
    onehot = np.zeros((n, len(ROAD_CLASSES)), dtype=np.float32)
    for sid, c in enumerate(classes):
        onehot[sid, ROAD_CLASSES.index(c)] = 1.0
    features = np.column_stack([
        (lengths / 1000.0).astype(np.float32),
        (np.array(speeds) / 100.0).astype(np.float32),
        onehot,
    ])
    return RoadNetwork(
        adjacency=adjacency,
        features=features,
        geometry=geometry,
        lengths_m=lengths,
        speed_limits_kmh=np.array(speeds, dtype=np.float64),
        feature_names=("length_km", "speed_limit_100kmh") + tuple(f"class_{c}" for c in ROAD_CLASSES),
    )


def grid_spec_for(cfg: SynthConfig) -> GridSpec:
    extent = (cfg.lattice - 1) * cfg.segment_length_m
    m_per_deg_lon = EARTH_M_PER_DEG * math.cos(math.radians(cfg.origin_lat))
    margin_lon = cfg.box_margin_m / m_per_deg_lon
    margin_lat = cfg.box_margin_m / EARTH_M_PER_DEG
    return GridSpec(
        min_x=cfg.origin_lon - margin_lon,
        min_y=cfg.origin_lat - margin_lat,
        max_x=cfg.origin_lon + extent / m_per_deg_lon + margin_lon,
        max_y=cfg.origin_lat + extent / EARTH_M_PER_DEG + margin_lat,
        cell_size_m=cfg.cell_size_m,
    )


def _direction(net: RoadNetwork, sid: int) -> np.ndarray:
    geo = net.geometry[sid]
    return geo[-1] - geo[0]


def _walk(cfg: SynthConfig, net: RoadNetwork, length: int, rng: Rng) -> list[int]:
    """Turn-biased random walk: prefers straight continuation, rarely U-turns."""
    gen = rng.gen
    sid = int(gen.integers(0, net.n_segments))
    walk = [sid]
    while len(walk) < length:
        options = net.adjacency[walk[-1]]
        if len(options) == 0:
            break
        cur = _direction(net, walk[-1])
        weights = np.empty(len(options))
        for k, nxt in enumerate(options):
            d = _direction(net, int(nxt))
            cross = cur[0] * d[1] - cur[1] * d[0]
            dot = float(np.dot(cur, d))
            if dot > 0 and abs(cross) < 1e-12:
                weights[k] = cfg.straight_weight
            elif dot < 0 and abs(cross) < 1e-12:
                weights[k] = cfg.uturn_weight
            else:
                weights[k] = cfg.turn_weight
        weights /= weights.sum()
        walk.append(int(options[gen.choice(len(options), p=weights)]))
    return walk


def route_travel_time(cfg: SynthConfig, net: RoadNetwork, segments: list[int],
                      t0: float) -> np.ndarray:
    """Entry timestamps along a route; each segment is traversed at its base
    speed scaled by the hour-of-day factor at entry."""
    times = [float(t0)]
    for sid in segments[:-1]:
        speed_ms = net.speed_limits_kmh[sid] / 3.6 * hour_factor(cfg, times[-1])
        times.append(times[-1] + net.lengths_m[sid] / speed_ms)
    return np.array(times, dtype=np.float64)


def _raw_points(cfg: SynthConfig, net: RoadNetwork, segments: list[int],
                times: np.ndarray, spec: GridSpec, rng: Rng) -> np.ndarray:
    """Sample points along segment polylines with clipped GPS jitter."""
    gen = rng.gen
    k = cfg.points_per_segment
    pts: list[tuple[float, float, float]] = []
    m_per_deg_lon = spec.m_per_deg_lon
    for i, sid in enumerate(segments):
        geo = net.geometry[sid]
        t_in = times[i]
        if i + 1 < len(times):
            dt = times[i + 1] - times[i]
        else:
            speed_ms = net.speed_limits_kmh[sid] / 3.6 * hour_factor(cfg, t_in)
            dt = net.lengths_m[sid] / speed_ms
        fracs = np.arange(k) / k
        if i == len(segments) - 1:
            fracs = np.append(fracs, 1.0 - 1e-9)
        for f in fracs:
            lon = geo[0, 0] + f * (geo[-1, 0] - geo[0, 0])
            lat = geo[0, 1] + f * (geo[-1, 1] - geo[0, 1])
            noise = gen.normal(0.0, cfg.gps_noise_m, size=2)
            noise = np.clip(noise, -3 * cfg.gps_noise_m, 3 * cfg.gps_noise_m)
            lon += noise[0] / m_per_deg_lon
            lat += noise[1] / EARTH_M_PER_DEG
            lon = min(max(lon, spec.min_x), spec.max_x)
            lat = min(max(lat, spec.min_y), spec.max_y)
            pts.append((lon, lat, t_in + f * dt))
    return np.array(pts, dtype=np.float64)


def synth_generate(cfg: SynthConfig, rng: Rng
                   ) -> tuple[RoadNetwork, GridSpec, list[RoadTrajectory], list[RawTrajectory]]:
    """Deterministic synthetic dataset: network, grid spec, matched and raw
    trajectories (aligned by id)."""
    cfg.validate()
    net = build_lattice(cfg, rng)
    spec = grid_spec_for(cfg)
    road_trajs: list[RoadTrajectory] = []
    raw_trajs: list[RawTrajectory] = []
    for t_idx in range(cfg.trajectories):
        traj_rng = rng.child("traj", t_idx)
        gen = traj_rng.gen
        length = int(gen.integers(cfg.min_road_len, cfg.max_road_len + 1))
        walk = _walk(cfg, net, length, traj_rng.child("walk"))
        t0 = WEEK_START_UNIX + float(gen.integers(0, cfg.start_window_days * 86400))
        times = route_travel_time(cfg, net, walk, t0)
        tid = f"t{t_idx:06d}"
        road_trajs.append(RoadTrajectory(tid, np.array(walk, dtype=np.int64), times))
        raw_trajs.append(RawTrajectory(tid, _raw_points(cfg, net, walk, times, spec,
                                                        traj_rng.child("gps"))))
    return net, spec, road_trajs, raw_trajs
