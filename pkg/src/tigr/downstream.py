"""Frozen-encoder evaluation: trajectory similarity search, travel time
estimation, destination prediction, and similar-trajectory GeoJSON export.

Encoders stay frozen throughout; TTE and DP train small two-layer heads on
the extracted embeddings. The TS protocol splits each evaluation
trajectory into its odd- and even-indexed points (1-based, so the odd half
contains the origin), ranks database entries by dot-product similarity,
and adds k_neg distractor trajectories' even halves to the database.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Rng, Tensor, adam_step
from .data import ConfigError, GridSpec, RoadNetwork
from .model import TigrModel
from .pipeline import Artifacts, PreparedSample, subsample


@dataclass
class TsInstance:
    """Similarity-search protocol instance: odd halves query a database of
    even halves plus k_neg distractor even halves."""

    queries: list[PreparedSample]
    database: list[PreparedSample]
    truth: np.ndarray  # (|Q|,) database index of each query's even half
    query_ids: list[str]

    @property
    def k_neg(self) -> int:
        return len(self.database) - len(self.queries)


def odd_even_split(sample: PreparedSample, spec: GridSpec
                   ) -> tuple[PreparedSample, PreparedSample] | None:
    """Odd-indexed points (1st, 3rd, ... — 1-based) and even-indexed points
    as two sub-trajectories; None when either half degenerates."""
    n_raw, n_road = len(sample.raw), len(sample.road)
    odd = subsample(sample, np.arange(0, n_raw, 2), np.arange(0, n_road, 2),
                    spec, sample.id + "#odd")
    even = subsample(sample, np.arange(1, n_raw, 2), np.arange(1, n_road, 2),
                     spec, sample.id + "#even")
    if odd is None or even is None:
        return None
    return odd, even


def ts_build(samples: list[PreparedSample], k_neg: int, rng: Rng, spec: GridSpec,
             n_queries: int | None = None) -> TsInstance:
    """Build the TS instance from evaluation trajectories of length >= 4.

    The first n_queries splittable trajectories (shuffled) contribute both
    halves; the next k_neg contribute only their even halves as
    distractors.
    """
    eligible = [s for s in samples if len(s.raw) >= 4 and len(s.road) >= 4]
    order = rng.permutation(len(eligible))
    splits = []
    for i in order:
        pair = odd_even_split(eligible[i], spec)
        if pair is not None:
            splits.append(pair)
    if n_queries is None:
        n_queries = len(splits) - k_neg
    if n_queries < 1 or len(splits) < n_queries + k_neg:
        raise ConfigError(
            f"insufficient trajectories: need {n_queries} queries + {k_neg} distractors, "
            f"have {len(splits)} splittable of {len(eligible)} eligible")
    queries = [odd for odd, _ in splits[:n_queries]]
    database = [even for _, even in splits[:n_queries]]
    database += [even for _, even in splits[n_queries:n_queries + k_neg]]
    return TsInstance(queries=queries, database=database,
                      truth=np.arange(n_queries), query_ids=[q.id[:-4] for q in queries])


def rank_metrics(q_emb: np.ndarray, d_emb: np.ndarray, truth: np.ndarray,
                 db_subset: int | None = None) -> dict[str, float]:
    """Mean rank and hit ratios of the true database entry per query.

    Similarity is the raw dot product; rank 1 is best. Ties break by
    ascending database index. db_subset evaluates against only the first
    entries (nested k_neg sweeps reuse one embedding matrix).
    """
    if db_subset is not None:
        d_emb = d_emb[:db_subset]
    sims = q_emb.astype(np.float64) @ d_emb.astype(np.float64).T
    ranks = np.empty(len(q_emb), dtype=np.int64)
    for i in range(len(q_emb)):
        s_true = sims[i, truth[i]]
        better = np.count_nonzero(sims[i] > s_true)
        tied_before = np.count_nonzero(sims[i][:truth[i]] == s_true)
        ranks[i] = 1 + better + tied_before
    return {
        "mr": float(ranks.mean()),
        "hr1": float((ranks <= 1).mean()),
        "hr5": float((ranks <= 5).mean()),
    }


def ts_evaluate(instance: TsInstance, model: TigrModel, artifacts: Artifacts) -> dict[str, float]:
    q_emb = model.encode_samples(instance.queries, artifacts)
    d_emb = model.encode_samples(instance.database, artifacts)
    return rank_metrics(q_emb, d_emb, instance.truth)


def ts_kneg_sweep(instance: TsInstance, model: TigrModel, artifacts: Artifacts,
                  k_values: list[int]) -> list[dict[str, float]]:
    """Evaluate one instance at several k_neg by truncating the distractor
    tail (nested databases, one embedding pass)."""
    if max(k_values) > instance.k_neg:
        raise ConfigError(f"sweep needs k_neg up to {max(k_values)}, instance has {instance.k_neg}")
    q_emb = model.encode_samples(instance.queries, artifacts)
    d_emb = model.encode_samples(instance.database, artifacts)
    rows = []
    for k in k_values:
        m = rank_metrics(q_emb, d_emb, instance.truth, db_subset=len(instance.queries) + k)
        rows.append({"k_neg": k, **m})
    return rows


# ---------------------------------------------------------------------------
# prediction heads
# ---------------------------------------------------------------------------


@dataclass
class HeadConfig:
    epochs: int = 30
    lr: float = 1e-3
    batch: int = 128


class HeadModel:
    """Two affine maps with a SiLU between, trained on frozen embeddings."""

    def __init__(self, in_dim: int, out_dim: int, rng: Rng):
        s = 1.0 / math.sqrt(in_dim)
        self.w1 = Parameter("head.w1", rng.child("w1").normal(s, (in_dim, in_dim)))
        self.b1 = Parameter("head.b1", np.zeros(in_dim, dtype=np.float32))
        self.w2 = Parameter("head.w2", rng.child("w2").normal(s, (in_dim, out_dim)))
        self.b2 = Parameter("head.b2", np.zeros(out_dim, dtype=np.float32))

    def parameters(self) -> list[Parameter]:
        return [self.w1, self.b1, self.w2, self.b2]

    def forward(self, x) -> Tensor:
        h = ad.silu(ad.add(ad.matmul(x, self.w1.tensor), self.b1.tensor))
        return ad.add(ad.matmul(h, self.w2.tensor), self.b2.tensor)

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self.forward(Tensor(x)).data


def _head_epochs(head: HeadModel, X: np.ndarray, loss_of_batch, cfg: HeadConfig, rng: Rng):
    step = 0
    n = X.shape[0]
    for epoch in range(cfg.epochs):
        order = rng.child("shuffle", epoch).permutation(n)
        for lo in range(0, n, cfg.batch):
            idx = order[lo:lo + cfg.batch]
            step += 1
            loss = loss_of_batch(idx)
            loss.backward()
            adam_step(head.parameters(), lr=cfg.lr, step=step)


def _standardizer(X: np.ndarray):
    mu = X.mean(axis=0)
    sigma = np.maximum(X.std(axis=0), 1e-6)
    return lambda A: ((A - mu) / sigma).astype(np.float32)


def train_regression_head(X_train: np.ndarray, y_train: np.ndarray, cfg: HeadConfig,
                          rng: Rng):
    """MSE-trained scalar regressor; inputs and labels are z-scored on train
    statistics, predictions returned in original units."""
    mu, sigma = float(y_train.mean()), float(y_train.std())
    sigma = max(sigma, 1e-6)
    y_std = ((y_train - mu) / sigma).astype(np.float32)
    std = _standardizer(X_train)
    Xs = std(X_train)
    head = HeadModel(Xs.shape[1], 1, rng.child("init"))

    def loss_of_batch(idx):
        pred = head.forward(Tensor(Xs[idx]))
        d = ad.sub(pred, y_std[idx][:, None])
        return ad.mean(ad.mul(d, d))

    _head_epochs(head, Xs, loss_of_batch, cfg, rng)

    def predict(X: np.ndarray) -> np.ndarray:
        return head.predict(std(X))[:, 0] * sigma + mu

    return predict


def train_classifier_head(X_train: np.ndarray, labels: np.ndarray, n_classes: int,
                          cfg: HeadConfig, rng: Rng):
    """Cross-entropy classifier head; returns logits(X)."""
    std = _standardizer(X_train)
    Xs = std(X_train)
    head = HeadModel(Xs.shape[1], n_classes, rng.child("init"))
    labels = labels.astype(np.int64)

    def loss_of_batch(idx):
        logits = head.forward(Tensor(Xs[idx]))
        lse = ad.logsumexp(logits, axis=-1)
        picked = logits[np.arange(len(idx)), labels[idx]]
        return ad.mean(ad.sub(lse, picked))

    _head_epochs(head, Xs, loss_of_batch, cfg, rng)
    return lambda X: head.predict(std(X))


# ---------------------------------------------------------------------------
# travel time estimation
# ---------------------------------------------------------------------------


def tte_metrics(pred: np.ndarray, y: np.ndarray) -> dict[str, float]:
    err = pred.astype(np.float64) - y.astype(np.float64)
    return {
        "mae": float(np.abs(err).mean()),
        "mape": float((np.abs(err) / np.maximum(y, 1.0)).mean()),
        "rmse": float(np.sqrt((err ** 2).mean())),
    }


def travel_time_label(sample: PreparedSample) -> float:
    return float(sample.raw.times[-1] - sample.raw.times[0])


def tte_run(train_samples: list[PreparedSample], test_samples: list[PreparedSample],
            model: TigrModel, artifacts: Artifacts, cfg: HeadConfig, rng: Rng,
            features: tuple[np.ndarray, np.ndarray] | None = None) -> dict:
    """Travel time protocol: labels are last-minus-first timestamps, inputs
    are embeddings computed with every timestamp masked to the start time.

    `features` overrides the embedding extraction with (X_train, X_test)
    (diagnostic harness). Returns metrics plus a constant-predictor
    baseline row and the excluded zero-duration count.
    """
    keep_tr = [s for s in train_samples if travel_time_label(s) > 0]
    keep_te = [s for s in test_samples if travel_time_label(s) > 0]
    excluded = len(train_samples) + len(test_samples) - len(keep_tr) - len(keep_te)
    y_tr = np.array([travel_time_label(s) for s in keep_tr])
    y_te = np.array([travel_time_label(s) for s in keep_te])
    if features is not None:
        X_tr, X_te = features
    else:
        X_tr = model.encode_samples(keep_tr, artifacts, time_mode="start")
        X_te = model.encode_samples(keep_te, artifacts, time_mode="start")
    predict = train_regression_head(X_tr, y_tr, cfg, rng.child("tte"))
    metrics = tte_metrics(predict(X_te), y_te)
    baseline = tte_metrics(np.full_like(y_te, y_tr.mean()), y_te)
    return {"metrics": metrics, "baseline": baseline, "excluded_zero_duration": excluded,
            "n_train": len(keep_tr), "n_test": len(keep_te)}


# ---------------------------------------------------------------------------
# destination prediction
# ---------------------------------------------------------------------------


def dp_prefix(sample: PreparedSample, spec: GridSpec) -> PreparedSample | None:
    """First ceil(0.9 * L) tokens of each branch sequence."""
    n_raw = math.ceil(0.9 * len(sample.raw))
    n_road = math.ceil(0.9 * len(sample.road))
    return subsample(sample, np.arange(n_raw), np.arange(n_road), spec, sample.id + "#dp")


def macro_f1(pred: np.ndarray, truth: np.ndarray) -> float:
    """Macro-averaged F1 over classes with at least one test occurrence."""
    scores = []
    for c in np.unique(truth):
        tp = np.count_nonzero((pred == c) & (truth == c))
        fp = np.count_nonzero((pred == c) & (truth != c))
        fn = np.count_nonzero((pred != c) & (truth == c))
        denom_p, denom_r = tp + fp, tp + fn
        p = tp / denom_p if denom_p else 0.0
        r = tp / denom_r if denom_r else 0.0
        scores.append(2 * p * r / (p + r) if p + r > 0 else 0.0)
    return float(np.mean(scores))


def topk_accuracy(logits: np.ndarray, truth: np.ndarray, k: int) -> float:
    topk = np.argpartition(-logits, min(k, logits.shape[1] - 1), axis=1)[:, :k]
    return float(np.mean([truth[i] in topk[i] for i in range(len(truth))]))


def dp_run(train_samples: list[PreparedSample], test_samples: list[PreparedSample],
           model: TigrModel, artifacts: Artifacts, cfg: HeadConfig, rng: Rng) -> dict:
    """Destination protocol: embed the 90% prefix, classify the final road
    segment of the full trajectory. Reports Acc@1/Acc@5/macro-F1 plus a
    majority-class baseline row."""
    spec = artifacts.grid_spec
    pairs_tr = [(dp_prefix(s, spec), int(s.road.segments[-1])) for s in train_samples]
    pairs_te = [(dp_prefix(s, spec), int(s.road.segments[-1])) for s in test_samples]
    pairs_tr = [(p, y) for p, y in pairs_tr if p is not None]
    pairs_te = [(p, y) for p, y in pairs_te if p is not None]
    y_tr = np.array([y for _, y in pairs_tr], dtype=np.int64)
    y_te = np.array([y for _, y in pairs_te], dtype=np.int64)
    X_tr = model.encode_samples([p for p, _ in pairs_tr], artifacts)
    X_te = model.encode_samples([p for p, _ in pairs_te], artifacts)
    n_classes = artifacts.net.n_segments
    logits_fn = train_classifier_head(X_tr, y_tr, n_classes, cfg, rng.child("dp"))
    logits = logits_fn(X_te)
    pred = logits.argmax(axis=1)
    majority = int(np.bincount(y_tr, minlength=n_classes).argmax())
    top5_train = np.argsort(-np.bincount(y_tr, minlength=n_classes))[:5]
    metrics = {
        "acc1": float((pred == y_te).mean()),
        "acc5": topk_accuracy(logits, y_te, 5),
        "f1": macro_f1(pred, y_te),
    }
    baseline = {
        "acc1": float((y_te == majority).mean()),
        "acc5": float(np.mean([y in top5_train for y in y_te])),
        "f1": macro_f1(np.full_like(y_te, majority), y_te),
    }
    return {"metrics": metrics, "baseline": baseline,
            "n_train": len(y_tr), "n_test": len(y_te)}


# ---------------------------------------------------------------------------
# similar-trajectory export
# ---------------------------------------------------------------------------


def trajectory_geometry(sample: PreparedSample, net: RoadNetwork) -> list[list[list[float]]]:
    """MultiLineString coordinates from the road sequence's segment
    polylines (sub-trajectories need not be contiguous)."""
    return [[[float(x), float(y)] for x, y in net.geometry[int(seg)]]
            for seg in sample.road.segments]


def export_similar_geojson(query_id: str, k: int, instance: TsInstance,
                           model: TigrModel, artifacts: Artifacts, path) -> dict:
    """FeatureCollection: the query trajectory plus its top-k most similar
    database trajectories (rank property, dot-product similarity)."""
    try:
        qi = instance.query_ids.index(query_id)
    except ValueError:
        raise ConfigError(f"unknown query id {query_id!r}") from None
    q_emb = model.encode_samples([instance.queries[qi]], artifacts)
    d_emb = model.encode_samples(instance.database, artifacts)
    sims = (q_emb.astype(np.float64) @ d_emb.astype(np.float64).T)[0]
    order = np.lexsort((np.arange(len(sims)), -sims))[:k]
    features = [{
        "type": "Feature",
        "geometry": {"type": "MultiLineString",
                     "coordinates": trajectory_geometry(instance.queries[qi], artifacts.net)},
        "properties": {"role": "query", "id": query_id},
    }]
    for rank, di in enumerate(order, start=1):
        features.append({
            "type": "Feature",
            "geometry": {"type": "MultiLineString",
                         "coordinates": trajectory_geometry(instance.database[di], artifacts.net)},
            "properties": {"role": "match", "rank": rank, "id": instance.database[di].id,
                           "similarity": float(sims[di])},
        })
    doc = {"type": "FeatureCollection", "features": features}
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True)
        fh.write("\n")
    return doc
