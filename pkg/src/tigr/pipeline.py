"""Dataset assembly and per-trajectory featurization.

A preprocessed sample carries the raw point sequence, the map-matched road
sequence, and the derived grid sequence. Featurization turns one sample
into the three branch token inputs: grid ids, road ids, and the constant
graph-convolution/time inputs of the spatio-temporal branch. Transition
and traffic matrices are built on the training split only.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import GridSpec, GridTrajectory, RawTrajectory, RoadNetwork, RoadTrajectory, map_to_grid
from .spatiotemporal import (
    TrafficMatrix,
    TransitionMatrix,
    hour_of_day,
    traffic_feature_dim,
)


@dataclass
class PreparedSample:
    """A TrajSample plus its derived grid token sequence."""

    id: str
    raw: RawTrajectory
    road: RoadTrajectory
    grid: GridTrajectory


def prepare_samples(raw_trajs: list[RawTrajectory], road_trajs: list[RoadTrajectory],
                    spec: GridSpec) -> tuple[list[PreparedSample], dict[str, int]]:
    """Pair raw and matched trajectories by id and derive grid sequences.

    Samples whose grid or road sequence is shorter than 2 tokens are
    dropped (attention and pooling need at least 2); counts reported.
    """
    road_by_id = {t.id: t for t in road_trajs}
    samples: list[PreparedSample] = []
    report = {"prepared": 0, "no_match": 0, "grid_too_short": 0, "road_too_short": 0}
    for raw in raw_trajs:
        road = road_by_id.get(raw.id)
        if road is None:
            report["no_match"] += 1
            continue
        if len(road) < 2:
            report["road_too_short"] += 1
            continue
        grid = map_to_grid(raw, spec)
        if grid is None or len(grid) < 2:
            report["grid_too_short"] += 1
            continue
        samples.append(PreparedSample(raw.id, raw, road, grid))
        report["prepared"] += 1
    return samples, report


@dataclass
class Artifacts:
    """Preprocessing products shared by training and evaluation."""

    net: RoadNetwork
    grid_spec: GridSpec
    transition: TransitionMatrix
    traffic: TrafficMatrix
    st_self_table: np.ndarray  # (V, 24, F): P'[v,v] * x_v(h)
    st_nbr_table: np.ndarray  # (V, 24, F): sum_u P'[v,u] * x_u(h)

    @property
    def st_feature_dim(self) -> int:
        return self.st_self_table.shape[2]


def build_st_tables(net: RoadNetwork, tm: TransitionMatrix, traffic: TrafficMatrix
                    ) -> tuple[np.ndarray, np.ndarray]:
    """Precompute per-(segment, hour) graph-convolution inputs so featurizing
    a trajectory reduces to a gather."""
    n = net.n_segments
    F = traffic_feature_dim(net)
    feats = np.empty((n, 24, F), dtype=np.float64)
    feats[:, :, 0] = traffic.X / 100.0
    feats[:, :, 1:] = net.features[:, None, :]
    self_table = tm.P_norm.diagonal()[:, None, None] * feats
    nbr_table = np.zeros_like(feats)
    for v in range(n):
        for u in net.adjacency[v]:
            nbr_table[v] += tm.P_norm[v, int(u)] * feats[int(u)]
    return self_table.astype(np.float32), nbr_table.astype(np.float32)


def make_artifacts(net: RoadNetwork, spec: GridSpec, tm: TransitionMatrix,
                   traffic: TrafficMatrix) -> Artifacts:
    self_table, nbr_table = build_st_tables(net, tm, traffic)
    return Artifacts(net=net, grid_spec=spec, transition=tm, traffic=traffic,
                     st_self_table=self_table, st_nbr_table=nbr_table)


@dataclass
class BranchTokens:
    """Constant per-trajectory inputs of the three branches."""

    grid_ids: np.ndarray  # (Lg,) int64
    road_ids: np.ndarray  # (Lr,) int64
    st_self: np.ndarray   # (Lr, F) float32
    st_nbr: np.ndarray    # (Lr, F) float32
    st_times: np.ndarray  # (Lr,) float64


def featurize(sample: PreparedSample, artifacts: Artifacts,
              time_mode: str = "real") -> BranchTokens:
    """Branch inputs for one sample.

    time_mode "real" uses each token's timestamp; "start" computes every
    temporal feature as if the token occurred at the trajectory's first
    timestamp (the travel-time protocol's leak guard).
    """
    if time_mode not in ("real", "start"):
        raise ValueError(f"unknown time_mode {time_mode!r}")
    segs = sample.road.segments
    times = sample.road.times
    if time_mode == "start":
        times = np.full_like(times, times[0])
    hours = hour_of_day(times)
    return BranchTokens(
        grid_ids=sample.grid.cells,
        road_ids=segs,
        st_self=artifacts.st_self_table[segs, hours],
        st_nbr=artifacts.st_nbr_table[segs, hours],
        st_times=times,
    )


def subsample(sample: PreparedSample, raw_idx: np.ndarray, road_idx: np.ndarray,
              spec: GridSpec, new_id: str) -> PreparedSample | None:
    """Derived sample from index subsets of the raw and road sequences
    (odd/even halves, prefixes). The grid sequence is re-derived from the
    raw subset. Returns None when any branch falls under 2 tokens."""
    raw = RawTrajectory(new_id, sample.raw.points[raw_idx])
    road = RoadTrajectory(new_id, sample.road.segments[road_idx], sample.road.times[road_idx])
    if len(raw) < 2 or len(road) < 2:
        return None
    grid = map_to_grid(raw, spec)
    if grid is None or len(grid) < 2:
        return None
    return PreparedSample(new_id, raw, road, grid)
