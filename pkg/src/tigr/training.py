"""Contrastive pretraining: InfoNCE against per-branch negative queues,
intra- and inter-modal losses, and the training loop.

Anchor-side projections are the gradient-bearing queries; target-side
projections are the positives and fill the FIFO queues. All projections
are L2-normalized before the loss so similarities are cosines (a raw dot
product at tau = 0.05 is numerically divergent).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import GradientError, Rng, Tensor, adam_step
from .checkpoint import save_checkpoint
from .data import ConfigError
from .encoder import encoder_forward, ema_update
from .masking import ViewConfig, default_view1, default_view2, view_indices
from .model import TigrModel, pad_stack, pad_stack_ids
from .pipeline import Artifacts, PreparedSample, featurize

INTER_PAIRS = (("r", "g"), ("st", "r"))  # (query branch, positive branch); no g<->st


@dataclass
class TrainConfig:
    lr: float = 0.001
    batch: int = 512
    epochs: int = 10
    tau: float = 0.05
    lam: float = 0.5
    queue: int = 2048
    seed: int = 7
    use_inter: bool = True
    view1: ViewConfig = field(default_factory=default_view1)
    view2: ViewConfig = field(default_factory=default_view2)

    def __post_init__(self):
        if self.tau <= 0:
            raise ConfigError("tau must be positive")
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError("lambda must lie in [0, 1]")
        if self.batch < 2:
            raise ConfigError("batch must be >= 2")


class NegativeQueue:
    """Fixed-capacity FIFO ring of L2-normalized target projections."""

    def __init__(self, branch: str, capacity: int, dim: int):
        self.branch = branch
        self.capacity = capacity
        self.dim = dim
        self._buf = np.zeros((capacity, dim), dtype=np.float32)
        self._head = 0
        self.size = 0

    def enqueue(self, batch: np.ndarray) -> None:
        """Append a batch, evicting the oldest entries beyond capacity."""
        batch = np.asarray(batch, dtype=np.float32)
        if batch.shape[0] >= self.capacity:
            self._buf[...] = batch[-self.capacity:]
            self._head = 0
            self.size = self.capacity
            return
        for row in batch:
            self._buf[self._head] = row
            self._head = (self._head + 1) % self.capacity
            self.size = min(self.size + 1, self.capacity)

    def as_array(self) -> np.ndarray:
        """Current entries, oldest first."""
        if self.size < self.capacity:
            return self._buf[:self.size].copy()
        return np.concatenate([self._buf[self._head:], self._buf[:self._head]])


def info_nce(query: Tensor, positive, queue_entries: np.ndarray | None, tau: float) -> Tensor:
    """Mean over the batch of -log( e^{q.p/tau} / (sum_j e^{q.n_j/tau} + e^{q.p/tau}) ).

    `query` carries gradient; `positive` (B, d) and the queue entries are
    constants. With an empty queue the positive is the only denominator
    term and the loss is exactly zero.
    """
    positive = ad.detach(positive) if isinstance(positive, Tensor) else Tensor(positive)
    pos_logit = ad.mul(ad.sum_(ad.mul(query, positive), axis=-1, keepdims=True), 1.0 / tau)
    if queue_entries is not None and len(queue_entries) > 0:
        neg_logits = ad.mul(ad.matmul(query, Tensor(queue_entries.T)), 1.0 / tau)
        logits = ad.concat([neg_logits, pos_logit], axis=1)
    else:
        logits = pos_logit
    # subtracting the positive logit before logsumexp keeps tiny losses
    # representable: loss_row = lse(z - z_pos)
    shifted = ad.sub(logits, pos_logit)
    return ad.mean(ad.logsumexp(shifted, axis=-1))


def intra_loss(anchor_projs: dict[str, Tensor], target_projs: dict[str, np.ndarray],
               queues: dict[str, NegativeQueue], tau: float) -> Tensor:
    """Mean over branches of the within-branch InfoNCE (View 1 anchor
    projections against View 2 target projections)."""
    branches = list(anchor_projs)
    terms = [info_nce(anchor_projs[b], target_projs[b], queues[b].as_array(), tau)
             for b in branches]
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return ad.mul(total, 1.0 / len(terms))


def inter_loss(anchor_projs: dict[str, Tensor], target_projs: dict[str, np.ndarray],
               queues: dict[str, NegativeQueue], tau: float) -> Tensor:
    """Cross-branch InfoNCE over the grid<->road and road<->st pairings;
    the grid<->st pairing is deliberately absent."""
    terms = []
    for q_branch, p_branch in INTER_PAIRS:
        if q_branch in anchor_projs and p_branch in target_projs:
            terms.append(info_nce(anchor_projs[q_branch], target_projs[p_branch],
                                  queues[p_branch].as_array(), tau))
    if not terms:
        return Tensor(0.0)
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return ad.mul(total, 1.0 / len(terms))


@dataclass
class LossReport:
    epoch: int
    step: int
    intra: float
    inter: float
    total: float
    per_branch: dict[str, float]


def make_queues(model: TigrModel, capacity: int) -> dict[str, NegativeQueue]:
    return {b: NegativeQueue(b, capacity, model.cfg.d_proj) for b in model.cfg.branches}


def _branch_view_batches(model: TigrModel, feats, branch: str, view_cfg: ViewConfig,
                         rng: Rng, view_tag: str, st_full: list[Tensor] | None,
                         detached: bool):
    """Masked, padded (B, L, d) batch for one branch and one view."""
    if branch == "st":
        rows = []
        for i, f in enumerate(feats):
            idx = view_indices(st_full[i].shape[0], view_cfg, rng.child(i, branch, view_tag))
            if detached:
                rows.append(Tensor(st_full[i].data[idx]))
            else:
                rows.append(st_full[i][idx])
        return pad_stack(rows)
    ids_full = [f.grid_ids if branch == "g" else f.road_ids for f in feats]
    picked = [a[view_indices(len(a), view_cfg, rng.child(i, branch, view_tag))]
              for i, a in enumerate(ids_full)]
    embedder = model.embedders[branch]
    if detached:
        lmax = max(len(a) for a in picked)
        mat = np.zeros((len(picked), lmax), dtype=np.int64)
        mask = np.zeros((len(picked), lmax), dtype=bool)
        for i, a in enumerate(picked):
            mat[i, :len(a)] = a
            mask[i, :len(a)] = True
        return Tensor(embedder.table.data[mat]), mask
    return pad_stack_ids(picked, embedder)


def st_sequences(model: TigrModel, feats) -> list[Tensor] | None:
    if "st" not in model.cfg.branches:
        return None
    return [model.st_sequence(f) for f in feats]


def compute_target_projections(model: TigrModel, feats, st_full, cfg: TrainConfig,
                               rng: Rng) -> dict[str, np.ndarray]:
    """View-2 projections through the gradient-blocked target side."""
    out: dict[str, np.ndarray] = {}
    for b in model.cfg.branches:
        batch2, mask2 = _branch_view_batches(model, feats, b, cfg.view2, rng, "v2",
                                             st_full, detached=True)
        z2 = encoder_forward(batch2, mask2, model.target_encoders[b], dropout_p=0.0)
        out[b] = ad.l2_normalize(model.project_target(b, z2)).data.copy()
    return out


def compute_anchor_loss(model: TigrModel, feats, st_full,
                        queue_arrays: dict[str, np.ndarray], cfg: TrainConfig,
                        target_projs: dict[str, np.ndarray], rng: Rng,
                        dropout_p: float):
    """View-1 anchor forward plus the weighted objective.

    Returns (total, intra, inter, anchor_projs); target projections and
    queue snapshots enter as constants.
    """
    anchor_projs: dict[str, Tensor] = {}
    for b in model.cfg.branches:
        batch1, mask1 = _branch_view_batches(model, feats, b, cfg.view1, rng, "v1",
                                             st_full, detached=False)
        z1 = encoder_forward(batch1, mask1, model.encoders[b],
                             dropout_p=dropout_p, rng=rng.child("dropout", b))
        anchor_projs[b] = ad.l2_normalize(model.project_anchor(b, z1))
    l_intra = _mean_terms([info_nce(anchor_projs[b], target_projs[b], queue_arrays[b], cfg.tau)
                           for b in model.cfg.branches])
    if cfg.use_inter:
        terms = [info_nce(anchor_projs[qb], target_projs[pb], queue_arrays[pb], cfg.tau)
                 for qb, pb in INTER_PAIRS
                 if qb in anchor_projs and pb in target_projs]
        l_inter = _mean_terms(terms) if terms else Tensor(0.0)
    else:
        l_inter = Tensor(0.0)
    total = ad.add(ad.mul(l_intra, cfg.lam), ad.mul(l_inter, 1.0 - cfg.lam))
    return total, l_intra, l_inter, anchor_projs


def _mean_terms(terms: list[Tensor]) -> Tensor:
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return ad.mul(total, 1.0 / len(terms))


def train_step(samples: list[PreparedSample], model: TigrModel,
               queues: dict[str, NegativeQueue], cfg: TrainConfig,
               artifacts: Artifacts, rng: Rng, step: int,
               epoch: int = 0) -> LossReport:
    """One optimization step over a batch of trajectories.

    Builds the three branch sequences, masks them into two views per
    branch, encodes View 1 through the anchor side and View 2 through the
    gradient-blocked target side, applies the weighted intra/inter
    objective, updates anchor parameters with Adam, EMA-updates the
    targets, and finally enqueues the batch's target projections.
    """
    if len(samples) < 2:
        raise ConfigError("train_step needs a batch of >= 2 trajectories")
    feats = [featurize(s, artifacts, "real") for s in samples]
    st_full = st_sequences(model, feats)
    target_projs = compute_target_projections(model, feats, st_full, cfg, rng)
    queue_arrays = {b: queues[b].as_array() for b in model.cfg.branches}
    total, l_intra, l_inter, anchor_projs = compute_anchor_loss(
        model, feats, st_full, queue_arrays, cfg, target_projs, rng,
        dropout_p=model.cfg.dropout)
    if not np.isfinite(total.data):
        raise GradientError(f"non-finite loss at epoch {epoch} step {step}: "
                            f"intra={float(l_intra.data)!r} inter={float(l_inter.data)!r}")
    total.backward()
    adam_step(model.anchor_parameters(), lr=cfg.lr, step=step)
    for pair in model.ema_pairs:
        ema_update(pair)
    for b in model.cfg.branches:
        queues[b].enqueue(target_projs[b])
    per_branch = {b: float(np.dot(anchor_projs[b].data.astype(np.float64).ravel(),
                                  target_projs[b].astype(np.float64).ravel()) / len(samples))
                  for b in model.cfg.branches}
    return LossReport(epoch=epoch, step=step, intra=float(l_intra.data),
                      inter=float(l_inter.data), total=float(total.data),
                      per_branch=per_branch)


def pretrain(samples: list[PreparedSample], model: TigrModel, artifacts: Artifacts,
             cfg: TrainConfig, rng: Rng, out_dir=None,
             config_snapshot: dict | None = None) -> list[LossReport]:
    """Shuffled-epoch pretraining loop, deterministic under the rng seed.

    When out_dir is given, writes checkpoint_epoch{k}/ per epoch (epoch 0
    is the initial state), plus loss.csv with one row per step.
    """
    queues = make_queues(model, cfg.queue)
    reports: list[LossReport] = []
    step = 0
    snapshot = config_snapshot or {}
    if out_dir is not None:
        out_dir = Path(out_dir)
        save_checkpoint(out_dir / "checkpoint_epoch0", _checkpoint_arrays(model), 0, snapshot)
    for epoch in range(1, cfg.epochs + 1):
        order = rng.child("shuffle", epoch).permutation(len(samples))
        for lo in range(0, len(order), cfg.batch):
            batch_ids = order[lo:lo + cfg.batch]
            if batch_ids.size < 2:
                continue
            step += 1
            batch = [samples[i] for i in batch_ids]
            reports.append(train_step(batch, model, queues, cfg, artifacts,
                                      rng.child("step", step), step, epoch=epoch))
        if out_dir is not None:
            save_checkpoint(out_dir / f"checkpoint_epoch{epoch}",
                            _checkpoint_arrays(model), step, snapshot)
    if out_dir is not None:
        write_loss_csv(reports, Path(out_dir) / "loss.csv")
    return reports


def _checkpoint_arrays(model: TigrModel) -> dict[str, np.ndarray]:
    arrays = dict(model.named_arrays())
    for p in model.anchor_parameters():
        if p.m is not None:
            arrays[f"adam.m.{p.name}"] = p.m
            arrays[f"adam.v.{p.name}"] = p.v
    return arrays


def restore_from_checkpoint(model: TigrModel, arrays: dict[str, np.ndarray]) -> None:
    model.load_arrays({k: v for k, v in arrays.items() if not k.startswith("adam.")})
    for p in model.anchor_parameters():
        if f"adam.m.{p.name}" in arrays:
            p.m = arrays[f"adam.m.{p.name}"].copy()
            p.v = arrays[f"adam.v.{p.name}"].copy()


def write_loss_csv(reports: list[LossReport], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "step", "intra", "inter", "total"])
        for r in reports:
            w.writerow([r.epoch, r.step, repr(r.intra), repr(r.inter), repr(r.total)])
