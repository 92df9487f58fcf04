"""Spatio-temporal extraction branch.

From historical road trajectories we build a Laplace-smoothed transition
probability matrix and an hourly mean-speed traffic matrix. Per trajectory
token, a transition-weighted graph convolution embeds the traffic state,
a learnable cosine basis embeds time-of-week, and local multi-head
attention (each head attending within its own contiguous chunk of the
sequence) cross-fuses the two into the spatio-temporal token sequence.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Rng, Tensor
from .data import RoadNetwork, RoadTrajectory

SECONDS_PER_WEEK = 604800
# Unix epoch is a Thursday; shift so tau=0 lands on an ISO week start (Monday)
EPOCH_TO_MONDAY = 259200


def hour_of_day(t) -> np.ndarray:
    return (np.asarray(t, dtype=np.float64) // 3600).astype(np.int64) % 24


def week_hours(t) -> np.ndarray:
    """Hours since the start of the ISO week, in [0, 168)."""
    t = np.asarray(t, dtype=np.float64)
    return ((t + EPOCH_TO_MONDAY) % SECONDS_PER_WEEK) / 3600.0


# ---------------------------------------------------------------------------
# transition matrix
# ---------------------------------------------------------------------------


@dataclass
class TransitionMatrix:
    """P: Laplace-smoothed transition probabilities on the neighbor support.
    P_norm = D^-1 (P + I) with D the row-sum (degree) matrix of (P + I)."""

    P: np.ndarray  # (V, V) float64
    P_norm: np.ndarray  # (V, V) float64


def build_transition_matrix(trajs: list[RoadTrajectory], net: RoadNetwork) -> TransitionMatrix:
    """Count transitions and visits over historical trajectories:
    P[i, j] = (#transitions(i->j) + 1) / (#total_visits(i) + |N(i)|) for
    j in N(i); rows without neighbors stay zero and become identity rows in
    P_norm through the +I term."""
    n = net.n_segments
    counts = np.zeros((n, n), dtype=np.float64)
    visits = np.zeros(n, dtype=np.float64)
    for traj in trajs:
        segs = traj.segments
        np.add.at(visits, segs, 1.0)
        np.add.at(counts, (segs[:-1], segs[1:]), 1.0)
    P = np.zeros((n, n), dtype=np.float64)
    for i in range(n):
        nbrs = net.adjacency[i]
        if nbrs.size == 0:
            continue
        P[i, nbrs] = (counts[i, nbrs] + 1.0) / (visits[i] + nbrs.size)
    A = P + np.eye(n)
    D = A.sum(axis=1)
    return TransitionMatrix(P=P, P_norm=A / D[:, None])


def save_transition_csv(tm: TransitionMatrix, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["i", "j", "p"])
        for i, j in zip(*np.nonzero(tm.P)):
            w.writerow([int(i), int(j), repr(float(tm.P[i, j]))])


def load_transition_csv(path, n_segments: int) -> TransitionMatrix:
    P = np.zeros((n_segments, n_segments), dtype=np.float64)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        for i, j, p in reader:
            P[int(i), int(j)] = float(p)
    A = P + np.eye(n_segments)
    return TransitionMatrix(P=P, P_norm=A / A.sum(axis=1)[:, None])


# ---------------------------------------------------------------------------
# traffic matrix
# ---------------------------------------------------------------------------


@dataclass
class TrafficMatrix:
    X: np.ndarray  # (V, 24) mean speeds km/h after fallback fill
    coverage: np.ndarray  # (V, 24) observation counts


def build_traffic_matrix(trajs: list[RoadTrajectory], net: RoadNetwork
                         ) -> tuple[TrafficMatrix, dict[str, int]]:
    """Mean traversal speed per (segment, hour of entry).

    Speed of the pair (v_i, t_i) -> (v_{i+1}, t_{i+1}) is
    length(v_i) / (t_{i+1} - t_i), binned under hour_of_day(t_i).
    Empty cells fall back to: segment all-hour mean, then that hour's
    network mean, then the global mean, then the speed-limit column.
    """
    n = net.n_segments
    sums = np.zeros((n, 24), dtype=np.float64)
    counts = np.zeros((n, 24), dtype=np.int64)
    skipped = 0
    for traj in trajs:
        segs, times = traj.segments, traj.times
        dt = np.diff(times)
        hours = hour_of_day(times[:-1])
        for k in range(segs.size - 1):
            if dt[k] <= 0:
                skipped += 1
                continue
            v = int(segs[k])
            speed_kmh = net.lengths_m[v] / dt[k] * 3.6
            sums[v, hours[k]] += speed_kmh
            counts[v, hours[k]] += 1
    X = np.zeros((n, 24), dtype=np.float64)
    observed = counts > 0
    X[observed] = sums[observed] / counts[observed]

    seg_sum, seg_cnt = sums.sum(axis=1), counts.sum(axis=1)
    hour_sum, hour_cnt = sums.sum(axis=0), counts.sum(axis=0)
    total_sum, total_cnt = sums.sum(), counts.sum()
    filled = {"segment_mean": 0, "hour_mean": 0, "global_mean": 0, "speed_limit": 0}
    for v in range(n):
        for h in range(24):
            if observed[v, h]:
                continue
            if seg_cnt[v] > 0:
                X[v, h] = seg_sum[v] / seg_cnt[v]
                filled["segment_mean"] += 1
            elif hour_cnt[h] > 0:
                X[v, h] = hour_sum[h] / hour_cnt[h]
                filled["hour_mean"] += 1
            elif total_cnt > 0:
                X[v, h] = total_sum / total_cnt
                filled["global_mean"] += 1
            else:
                X[v, h] = net.speed_limits_kmh[v]
                filled["speed_limit"] += 1
    report = {"zero_duration_pairs": skipped, **filled}
    return TrafficMatrix(X=X, coverage=counts), report


def save_traffic_csv(tm: TrafficMatrix, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["segment", "hour", "speed", "count"])
        for v in range(tm.X.shape[0]):
            for h in range(24):
                w.writerow([v, h, repr(float(tm.X[v, h])), int(tm.coverage[v, h])])


def load_traffic_csv(path, n_segments: int) -> TrafficMatrix:
    X = np.zeros((n_segments, 24), dtype=np.float64)
    cov = np.zeros((n_segments, 24), dtype=np.int64)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        for v, h, s, c in reader:
            X[int(v), int(h)] = float(s)
            cov[int(v), int(h)] = int(c)
    return TrafficMatrix(X=X, coverage=cov)


# ---------------------------------------------------------------------------
# traffic-weighted graph convolution
# ---------------------------------------------------------------------------


@dataclass
class TrafficGcnParams:
    """Self and neighbor weight matrices, traffic-feature dim -> output dim."""

    w_self: Parameter
    w_nbr: Parameter

    @property
    def in_dim(self) -> int:
        return self.w_self.shape[0]

    def parameters(self) -> list[Parameter]:
        return [self.w_self, self.w_nbr]


def init_gcn_params(prefix: str, in_dim: int, out_dim: int, rng: Rng) -> TrafficGcnParams:
    scale = 1.0 / math.sqrt(in_dim)
    return TrafficGcnParams(
        w_self=Parameter(f"{prefix}.w_self", rng.child("w_self").normal(scale, (in_dim, out_dim))),
        w_nbr=Parameter(f"{prefix}.w_nbr", rng.child("w_nbr").normal(scale, (in_dim, out_dim))),
    )


def traffic_feature_dim(net: RoadNetwork) -> int:
    return 1 + net.features.shape[1]


def _token_features(net: RoadNetwork, traffic: TrafficMatrix, seg: int, hour: int) -> np.ndarray:
    # speed rescaled /100 so columns share magnitude with static features
    return np.concatenate([[traffic.X[seg, hour] / 100.0], net.features[seg]])


def gcn_token_inputs(segments: np.ndarray, times: np.ndarray, tm: TransitionMatrix,
                     traffic: TrafficMatrix, net: RoadNetwork) -> tuple[np.ndarray, np.ndarray]:
    """Constant per-token inputs of the graph convolution.

    Returns (self_part, nbr_part), each (L, F) float32:
      self_part[i] = P'[v,v] * x_v(hour)
      nbr_part[i]  = sum_{u in N(v)} P'[v,u] * x_u(hour)
    with hour = hour_of_day of the token's timestamp.
    """
    hours = hour_of_day(times)
    F = traffic_feature_dim(net)
    L = segments.size
    self_part = np.zeros((L, F), dtype=np.float64)
    nbr_part = np.zeros((L, F), dtype=np.float64)
    for i in range(L):
        v, h = int(segments[i]), int(hours[i])
        self_part[i] = tm.P_norm[v, v] * _token_features(net, traffic, v, h)
        for u in net.adjacency[v]:
            nbr_part[i] += tm.P_norm[v, int(u)] * _token_features(net, traffic, int(u), h)
    return self_part.astype(np.float32), nbr_part.astype(np.float32)


def traffic_gcn(self_part, nbr_part, params: TrafficGcnParams) -> Tensor:
    """Dynamic traffic embedding sequence: h_i = self_part_i @ W_self +
    nbr_part_i @ W_nbr. Inputs may be (L, F) or batched (B, L, F)."""
    return ad.add(ad.matmul(ad.Tensor(self_part) if isinstance(self_part, np.ndarray) else self_part,
                            params.w_self.tensor),
                  ad.matmul(ad.Tensor(nbr_part) if isinstance(nbr_part, np.ndarray) else nbr_part,
                            params.w_nbr.tensor))


# ---------------------------------------------------------------------------
# time embedding
# ---------------------------------------------------------------------------


@dataclass
class TimeEmbeddingParams:
    """Learnable frequencies/phases: slot 0 is linear, slots >= 1 cosine."""

    w: Parameter  # (q,)
    phi: Parameter  # (q,)

    @property
    def q(self) -> int:
        return self.w.shape[0]

    def parameters(self) -> list[Parameter]:
        return [self.w, self.phi]


def init_time_params(prefix: str, q: int, rng: Rng) -> TimeEmbeddingParams:
    """Frequencies start at daily and weekly harmonics (units: rad per hour
    of week time), remaining slots random; phases start at zero."""
    if q < 2:
        raise ValueError("time embedding needs q >= 2 (one linear + one cosine slot)")
    w = np.zeros(q, dtype=np.float64)
    w[0] = 1.0 / 168.0
    day, week = 2 * math.pi / 24.0, 2 * math.pi / 168.0
    harmonics = []
    k = 1
    while len(harmonics) < q - 1 and k <= 4:
        harmonics.extend([day * k, week * k])
        k += 1
    harmonics = harmonics[: q - 1]
    w[1:1 + len(harmonics)] = harmonics
    n_extra = q - 1 - len(harmonics)
    if n_extra > 0:
        w[1 + len(harmonics):] = rng.child("w").uniform(week, day * 4, size=n_extra)
    return TimeEmbeddingParams(
        w=Parameter(f"{prefix}.w", w),
        phi=Parameter(f"{prefix}.phi", np.zeros(q, dtype=np.float64)),
    )


def time_embed(times: np.ndarray, params: TimeEmbeddingParams) -> Tensor:
    """Embed timestamps: slot 0 = w0*tau + phi0, slot k = cos(wk*tau + phik),
    tau = hours within the ISO week. `times` (L,) or (B, L) -> (..., q)."""
    tau = week_hours(times).astype(np.float32)[..., None]
    angles = ad.add(ad.mul(Tensor(tau), params.w.tensor), params.phi.tensor)
    lin = angles[..., 0:1]
    per = ad.cos(angles[..., 1:])
    return ad.concat([lin, per], axis=-1)


# ---------------------------------------------------------------------------
# local multi-head attention
# ---------------------------------------------------------------------------


@dataclass
class LmaParams:
    """Per-head full-width projections: wq/wk/wv stacked (H, d, d), wo (d, d)."""

    wq: Parameter
    wk: Parameter
    wv: Parameter
    wo: Parameter

    @property
    def heads(self) -> int:
        return self.wq.shape[0]

    @property
    def width(self) -> int:
        return self.wq.shape[1]

    def parameters(self) -> list[Parameter]:
        return [self.wq, self.wk, self.wv, self.wo]


def init_lma_params(prefix: str, heads: int, width: int, rng: Rng) -> LmaParams:
    scale = 1.0 / math.sqrt(width)
    return LmaParams(
        wq=Parameter(f"{prefix}.wq", rng.child("wq").normal(scale, (heads, width, width))),
        wk=Parameter(f"{prefix}.wk", rng.child("wk").normal(scale, (heads, width, width))),
        wv=Parameter(f"{prefix}.wv", rng.child("wv").normal(scale, (heads, width, width))),
        wo=Parameter(f"{prefix}.wo", rng.child("wo").normal(scale, (width, width))),
    )


def local_multi_head_attention(tq, tk, tv, params: LmaParams,
                               pad_mask: np.ndarray | None = None) -> Tensor:
    """Chunked attention: the sequence is padded to a multiple of H and split
    into H contiguous chunks; head h projects and attends within chunk h
    only. Head outputs are concatenated along the sequence axis and
    projected by wo. Padded positions are excluded from the softmax and
    zeroed in the output. Inputs (L, d), output (L, d)."""
    tq, tk, tv = ad._promote(tq), ad._promote(tk), ad._promote(tv)
    L, d = tq.shape
    if tk.shape != (L, d) or tv.shape != (L, d):
        raise ad.DimensionError(f"LMA query/key/value shapes differ: {tq.shape} {tk.shape} {tv.shape}")
    H = params.heads
    Lp = ((L + H - 1) // H) * H
    if Lp % H != 0:
        raise AssertionError("padding contract violated")
    valid = np.ones(L, dtype=bool) if pad_mask is None else np.asarray(pad_mask, dtype=bool).copy()
    if Lp > L:
        pad = Tensor(np.zeros((Lp - L, d), dtype=np.float32))
        tq, tk, tv = (ad.concat([t, pad], axis=0) for t in (tq, tk, tv))
        valid = np.concatenate([valid, np.zeros(Lp - L, dtype=bool)])
    Lc = Lp // H
    qs = ad.reshape(tq, (H, Lc, d))
    ks = ad.reshape(tk, (H, Lc, d))
    vs = ad.reshape(tv, (H, Lc, d))
    Q = ad.matmul(qs, params.wq.tensor)
    K = ad.matmul(ks, params.wk.tensor)
    V = ad.matmul(vs, params.wv.tensor)
    logits = ad.mul(ad.matmul(Q, ad.transpose(K, (0, 2, 1))), 1.0 / math.sqrt(d))
    probs = ad.softmax_rows(logits, mask=valid.reshape(H, 1, Lc))
    att = ad.matmul(probs, V)
    out = ad.matmul(ad.reshape(att, (Lp, d)), params.wo.tensor)
    out = ad.mul(out, valid.reshape(Lp, 1).astype(np.float32))
    return out[:L] if Lp > L else out


def fuse_st(t_s, t_t, lma_st: LmaParams, lma_ts: LmaParams,
            pad_mask: np.ndarray | None = None) -> Tensor:
    """Cross-fuse traffic and time sequences (both (L, w)):
    LMA(T^s, T^t, T^t) || LMA(T^t, T^s, T^s) along the feature axis."""
    t_s, t_t = ad._promote(t_s), ad._promote(t_t)
    if t_s.shape != t_t.shape:
        raise ad.DimensionError(f"fuse_st length/width mismatch: {t_s.shape} vs {t_t.shape}")
    a = local_multi_head_attention(t_s, t_t, t_t, lma_st, pad_mask)
    b = local_multi_head_attention(t_t, t_s, t_s, lma_ts, pad_mask)
    return ad.concat([a, b], axis=-1)
