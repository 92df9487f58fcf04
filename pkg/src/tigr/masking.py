"""Token-drop masking strategies and their stacked composition.

Three strategies produce the two contrastive views of a token sequence:
random masking (rm) drops tokens independently, consecutive masking (cm)
drops one contiguous run, truncation (tc) drops a run anchored at either
the origin or the destination. A view stacks strategies in order, each
operating on the survivors of the previous; a min_keep backstop keeps
attention and pooling well-defined regardless of ratios.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Rng
from .data import ConfigError

KINDS = ("rm", "cm", "tc")


@dataclass(frozen=True)
class MaskingStrategy:
    kind: str
    ratio: float

    def __post_init__(self):
        object.__setattr__(self, "kind", self.kind.lower())
        if self.kind not in KINDS:
            raise ConfigError(f"unknown masking kind {self.kind!r} (expected one of {KINDS})")
        if not 0.0 < self.ratio < 1.0:
            raise ConfigError(f"masking ratio must be in (0,1), got {self.ratio}")


@dataclass(frozen=True)
class ViewConfig:
    strategies: tuple[MaskingStrategy, ...]
    min_keep: int = 2

    def __post_init__(self):
        if self.min_keep < 1:
            raise ConfigError("min_keep must be >= 1")


def default_view1(ratio: float = 0.3) -> ViewConfig:
    return ViewConfig((MaskingStrategy("tc", ratio), MaskingStrategy("cm", ratio)))


def default_view2(ratio: float = 0.3) -> ViewConfig:
    return ViewConfig((MaskingStrategy("rm", ratio),
                       MaskingStrategy("tc", ratio),
                       MaskingStrategy("cm", ratio)))


def random_mask(length: int, p: float, rng: Rng, min_keep: int = 2) -> np.ndarray:
    """Drop each index independently with probability p; re-add uniformly
    chosen dropped indices if fewer than min_keep survive."""
    gen = rng.gen
    keep = gen.random(length) >= p
    kept = np.flatnonzero(keep)
    if kept.size < min(min_keep, length):
        dropped = np.flatnonzero(~keep)
        need = min(min_keep, length) - kept.size
        extra = gen.choice(dropped, size=need, replace=False)
        kept = np.sort(np.concatenate([kept, extra]))
    return kept


def consecutive_mask(length: int, p: float, rng: Rng, min_keep: int = 2) -> np.ndarray:
    """Drop floor(p*length) consecutive indices at a uniform offset (capped
    so at least min_keep survive)."""
    k = min(int(p * length), max(0, length - min_keep))
    if k == 0:
        return np.arange(length)
    start = int(rng.gen.integers(0, length - k + 1))
    return np.concatenate([np.arange(start), np.arange(start + k, length)])


def truncate(length: int, p: float, rng: Rng, min_keep: int = 2) -> np.ndarray:
    """Drop floor(p*length) indices from the origin or the destination,
    side chosen uniformly."""
    k = min(int(p * length), max(0, length - min_keep))
    if k == 0:
        return np.arange(length)
    from_origin = bool(rng.gen.integers(0, 2))
    if from_origin:
        return np.arange(k, length)
    return np.arange(length - k)


_FUNCS = {"rm": random_mask, "cm": consecutive_mask, "tc": truncate}


def view_indices(length: int, cfg: ViewConfig, rng: Rng) -> np.ndarray:
    """Kept indices (original positions, sorted) after stacking the view's
    strategies on successive survivors."""
    kept = np.arange(length)
    for i, strat in enumerate(cfg.strategies):
        sub = _FUNCS[strat.kind](kept.size, strat.ratio, rng.child(i, strat.kind),
                                 min_keep=cfg.min_keep)
        kept = kept[sub]
    return kept


def apply_view(tokens, cfg: ViewConfig, rng: Rng):
    """Masked subsequence of `tokens` (ndarray rows or sequence elements)."""
    idx = view_indices(len(tokens), cfg, rng)
    if isinstance(tokens, np.ndarray):
        return tokens[idx]
    return [tokens[i] for i in idx]
