import numpy as np
import pytest

from tigr.autodiff import Rng
from tigr.data import RawTrajectory, RoadTrajectory
from tigr.model import ModelConfig, TigrModel
from tigr.pipeline import PreparedSample, make_artifacts, prepare_samples, subsample
from tigr.spatiotemporal import build_traffic_matrix, build_transition_matrix, traffic_feature_dim
from tigr.synth import WEEK_START_UNIX, SynthConfig, synth_generate


def build_tiny_dataset(n_traj=12, seed=101, lattice=3, min_len=4, max_len=6,
                       cell_size_m=150.0, max_tokens=None):
    """Small synthetic dataset: (samples, artifacts). max_tokens clips every
    branch sequence to a prefix (the acceptance gradient check wants L <= 8)."""
    cfg = SynthConfig(lattice=lattice, trajectories=n_traj, min_road_len=min_len,
                      max_road_len=max_len, points_per_segment=2, cell_size_m=cell_size_m)
    net, spec, road, raw = synth_generate(cfg, Rng(seed))
    samples, _ = prepare_samples(raw, road, spec)
    tm = build_transition_matrix(road, net)
    traffic, _ = build_traffic_matrix(road, net)
    artifacts = make_artifacts(net, spec, tm, traffic)
    if max_tokens is not None:
        clipped = []
        for s in samples:
            c = subsample(s, np.arange(min(len(s.raw), 2 * max_tokens)),
                          np.arange(min(len(s.road), max_tokens)), spec, s.id)
            if c is not None and len(c.grid) <= max_tokens:
                clipped.append(c)
        samples = clipped
    return samples, artifacts


def tiny_model_config(artifacts, **kw):
    defaults = dict(
        grid_vocab=artifacts.grid_spec.n_cells,
        road_vocab=artifacts.net.n_segments,
        st_feature_dim=traffic_feature_dim(artifacts.net),
        d_g=16, d_r=16, d_st=16, d_proj=8,
        n_layers=1, h_enc=2, h_lma=2, q=8,
        mu=0.99, dropout=0.1,
    )
    defaults.update(kw)
    return ModelConfig(**defaults)


def condition_for_gradcheck(samples, model):
    """Move the check to a well-conditioned point: timestamps near the week
    start (the time-embedding frequencies multiply tau, so h=1e-3 otherwise
    probes whole radians of the cosine) and embedding tables at a healthy
    scale (rmsnorm curvature grows as 1/||x||^3 at the 0.02 init).
    Central-difference truncation error is a property of the evaluation
    point; the gradients under test are unchanged in nature."""
    out = []
    for i, s in enumerate(samples):
        t0 = WEEK_START_UNIX + 240.0 * i
        road = RoadTrajectory(s.id, s.road.segments, t0 + (s.road.times - s.road.times[0]))
        pts = s.raw.points.copy()
        pts[:, 2] = t0 + (pts[:, 2] - pts[0, 2])
        out.append(PreparedSample(s.id, RawTrajectory(s.id, pts), road, s.grid))
    for emb in model.embedders.values():
        emb.table.data[...] *= 25.0
    return out


@pytest.fixture(scope="session")
def tiny_setup():
    samples, artifacts = build_tiny_dataset(n_traj=14, max_tokens=8)
    assert len(samples) >= 4
    return samples, artifacts


def make_gradcheck_fixture():
    """The pinned gradient-fidelity fixture: tiny config (all widths 16,
    one encoder layer, 4 trajectories of <= 8 tokens, queue 8), seeded
    queues, target projections held fixed (stop-gradient semantics).
    Returns (loss_fn, anchor parameters)."""
    from tigr.pipeline import featurize
    from tigr.training import (TrainConfig, compute_anchor_loss,
                               compute_target_projections, make_queues, st_sequences)

    samples, artifacts = build_tiny_dataset(n_traj=14, max_tokens=8)
    cfg = tiny_model_config(artifacts, dropout=0.0)
    model = TigrModel(cfg, Rng(5))
    batch = condition_for_gradcheck(samples[:4], model)
    tc = TrainConfig(batch=4, queue=8, seed=1)
    feats = [featurize(s, artifacts, "real") for s in batch]
    queues = make_queues(model, 8)
    qr = Rng(99)
    for b in model.cfg.branches:
        arr = qr.child(b).normal(1.0, (8, cfg.d_proj)).astype(np.float32)
        queues[b].enqueue(arr / np.linalg.norm(arr, axis=1, keepdims=True))
    queue_arrays = {b: queues[b].as_array() for b in model.cfg.branches}
    rng = Rng(7)
    target_projs = compute_target_projections(model, feats, st_sequences(model, feats), tc, rng)

    def loss():
        st_full = st_sequences(model, feats)
        total, *_ = compute_anchor_loss(model, feats, st_full, queue_arrays, tc,
                                        target_projs, rng, dropout_p=0.0)
        return total

    return loss, model.anchor_parameters()
