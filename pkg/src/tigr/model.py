"""The assembled three-branch model.

Anchor-side parameters (embedding tables, spatio-temporal featurizer,
encoders, projection heads) train by gradient; each branch's encoder and
head also have EMA-shadowed target copies providing stable contrastive
targets. Inference encodes full, unmasked sequences through the anchor
encoders and concatenates the pooled branch representations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Rng, Tensor
from .data import ConfigError
from .encoder import (
    EmaPair,
    EncoderParams,
    ProjectionHead,
    TokenEmbedder,
    clone_frozen,
    embed_tokens,
    encoder_forward,
    init_embedder,
    init_encoder_params,
    init_projection_head,
    project,
)
from .pipeline import Artifacts, BranchTokens, PreparedSample, featurize
from .spatiotemporal import (
    LmaParams,
    TimeEmbeddingParams,
    TrafficGcnParams,
    fuse_st,
    init_gcn_params,
    init_lma_params,
    init_time_params,
    time_embed,
    traffic_gcn,
)

BRANCHES = ("g", "r", "st")
BRANCH_PREFIX = {"g": "grid", "r": "road", "st": "st"}


@dataclass
class ModelConfig:
    grid_vocab: int
    road_vocab: int
    st_feature_dim: int
    d_g: int = 256
    d_r: int = 128
    d_st: int = 128
    d_proj: int = 128
    n_layers: int = 2
    h_enc: int = 8
    h_lma: int = 4
    q: int = 32
    mu: float = 0.99
    dropout: float = 0.1
    ffn_ratio: int = 4
    branches: tuple[str, ...] = BRANCHES
    use_rope: bool = True
    use_lma: bool = True

    def __post_init__(self):
        self.branches = tuple(self.branches)
        for b in self.branches:
            if b not in BRANCHES:
                raise ConfigError(f"unknown branch {b!r}")
        if not self.branches:
            raise ConfigError("at least one branch required")
        if self.d_st % 2 != 0:
            raise ConfigError("d_st must be even (two fused halves)")
        if not 0.0 <= self.mu <= 1.0:
            raise ConfigError("mu must lie in [0, 1]")
        if self.q < 2:
            raise ConfigError("time embedding dim q must be >= 2")

    @property
    def branch_dims(self) -> dict[str, int]:
        return {"g": self.d_g, "r": self.d_r, "st": self.d_st}

    @property
    def embed_dim(self) -> int:
        return sum(self.branch_dims[b] for b in self.branches)


@dataclass
class StBranchParams:
    """Featurizer of the spatio-temporal branch: graph convolution and time
    embedding projected to a common width, then cross-fused by two LMAs."""

    gcn: TrafficGcnParams
    time: TimeEmbeddingParams
    proj_s: Parameter  # (d_st/2, w)
    proj_t: Parameter  # (q, w)
    lma_st: LmaParams
    lma_ts: LmaParams

    def parameters(self) -> list[Parameter]:
        return (self.gcn.parameters() + self.time.parameters()
                + [self.proj_s, self.proj_t]
                + self.lma_st.parameters() + self.lma_ts.parameters())


class TigrModel:
    """Parameter container plus the forward paths shared by training and
    inference."""

    def __init__(self, cfg: ModelConfig, rng: Rng):
        self.cfg = cfg
        dims = cfg.branch_dims
        self.embedders: dict[str, TokenEmbedder] = {}
        if "g" in cfg.branches:
            self.embedders["g"] = init_embedder("grid.embed", cfg.grid_vocab, cfg.d_g,
                                                rng.child("grid.embed"))
        if "r" in cfg.branches:
            self.embedders["r"] = init_embedder("road.embed", cfg.road_vocab, cfg.d_r,
                                                rng.child("road.embed"))
        self.st: StBranchParams | None = None
        if "st" in cfg.branches:
            w = cfg.d_st // 2
            lma_heads = cfg.h_lma if cfg.use_lma else 1
            r = rng.child("st")
            scale_s = 1.0 / math.sqrt(w)
            scale_t = 1.0 / math.sqrt(cfg.q)
            self.st = StBranchParams(
                gcn=init_gcn_params("st.gcn", cfg.st_feature_dim, w, r.child("gcn")),
                time=init_time_params("st.time", cfg.q, r.child("time")),
                proj_s=Parameter("st.proj_s", r.child("proj_s").normal(scale_s, (w, w))),
                proj_t=Parameter("st.proj_t", r.child("proj_t").normal(scale_t, (cfg.q, w))),
                lma_st=init_lma_params("st.lma_st", lma_heads, w, r.child("lma_st")),
                lma_ts=init_lma_params("st.lma_ts", lma_heads, w, r.child("lma_ts")),
            )
        self.encoders: dict[str, EncoderParams] = {}
        self.heads: dict[str, ProjectionHead] = {}
        self.target_encoders: dict[str, EncoderParams] = {}
        self.target_heads: dict[str, ProjectionHead] = {}
        self.ema_pairs: list[EmaPair] = []
        for b in cfg.branches:
            prefix = BRANCH_PREFIX[b]
            enc = init_encoder_params(f"{prefix}.encoder", dims[b], cfg.n_layers, cfg.h_enc,
                                      rng.child(prefix, "encoder"), ffn_ratio=cfg.ffn_ratio,
                                      use_rope=cfg.use_rope)
            head = init_projection_head(f"{prefix}.head", dims[b], cfg.d_proj,
                                        rng.child(prefix, "head"))
            self.encoders[b] = enc
            self.heads[b] = head
            t_enc_params = clone_frozen(enc.parameters())
            t_head_params = clone_frozen(head.parameters())
            self.target_encoders[b] = self._encoder_from(t_enc_params, enc)
            self.target_heads[b] = ProjectionHead(*t_head_params)
            self.ema_pairs.append(EmaPair(anchor=enc.parameters() + head.parameters(),
                                          target=t_enc_params + t_head_params,
                                          mu=cfg.mu))
        self._project_calls = 0  # instrumentation for the inference-path contract

    @staticmethod
    def _encoder_from(params: list[Parameter], like: EncoderParams) -> EncoderParams:
        from .encoder import EncoderLayerParams
        per = 8
        layers = [EncoderLayerParams(*params[i * per:(i + 1) * per]) for i in range(len(like.layers))]
        return EncoderParams(layers=layers, gain_final=params[-1], heads=like.heads,
                             use_rope=like.use_rope)

    # -- parameter bookkeeping ---------------------------------------------

    def anchor_parameters(self) -> list[Parameter]:
        out: list[Parameter] = []
        for b in ("g", "r"):
            if b in self.embedders:
                out.extend(self.embedders[b].parameters())
        if self.st is not None:
            out.extend(self.st.parameters())
        for b in self.cfg.branches:
            out.extend(self.encoders[b].parameters())
            out.extend(self.heads[b].parameters())
        return out

    def target_parameters(self) -> list[Parameter]:
        out: list[Parameter] = []
        for pair in self.ema_pairs:
            out.extend(pair.target)
        return out

    def named_arrays(self) -> dict[str, np.ndarray]:
        return {p.name: p.data for p in self.anchor_parameters() + self.target_parameters()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for p in self.anchor_parameters() + self.target_parameters():
            if p.name not in arrays:
                raise KeyError(f"checkpoint missing parameter {p.name!r}")
            if arrays[p.name].shape != p.shape:
                raise ValueError(f"checkpoint shape mismatch for {p.name!r}: "
                                 f"{arrays[p.name].shape} != {p.shape}")
            p.data[...] = arrays[p.name]

    # -- forward pieces -----------------------------------------------------

    def st_sequence(self, tokens: BranchTokens) -> Tensor:
        """Spatio-temporal token sequence (L, d_st) for one trajectory."""
        assert self.st is not None
        t_s = traffic_gcn(tokens.st_self, tokens.st_nbr, self.st.gcn)
        t_t = time_embed(tokens.st_times, self.st.time)
        s_proj = ad.matmul(t_s, self.st.proj_s.tensor)
        t_proj = ad.matmul(t_t, self.st.proj_t.tensor)
        return fuse_st(s_proj, t_proj, self.st.lma_st, self.st.lma_ts)

    def branch_sequences(self, tokens: BranchTokens) -> dict[str, Tensor]:
        """Full (unmasked) token embedding sequence per active branch."""
        out: dict[str, Tensor] = {}
        if "g" in self.cfg.branches:
            out["g"] = embed_tokens(tokens.grid_ids, self.embedders["g"])
        if "r" in self.cfg.branches:
            out["r"] = embed_tokens(tokens.road_ids, self.embedders["r"])
        if "st" in self.cfg.branches:
            out["st"] = self.st_sequence(tokens)
        return out

    def project_anchor(self, branch: str, z: Tensor) -> Tensor:
        self._project_calls += 1
        return project(z, self.heads[branch])

    def project_target(self, branch: str, z: Tensor) -> Tensor:
        self._project_calls += 1
        return project(z, self.target_heads[branch])

    # -- inference -----------------------------------------------------------

    def encode_samples(self, samples: list[PreparedSample], artifacts: Artifacts,
                       time_mode: str = "real", batch_size: int = 256) -> np.ndarray:
        """Frozen-encoder embeddings z = z^g || z^r || z^st, (n, embed_dim).

        No masking, no projection heads, dropout off; anchor encoders only.
        """
        chunks = []
        for lo in range(0, len(samples), batch_size):
            chunk = samples[lo:lo + batch_size]
            feats = [featurize(s, artifacts, time_mode) for s in chunk]
            parts = []
            for b in self.cfg.branches:
                if b == "st":
                    batch, mask = pad_stack([self.st_sequence(f) for f in feats])
                else:
                    ids = [f.grid_ids if b == "g" else f.road_ids for f in feats]
                    batch, mask = pad_stack_ids(ids, self.embedders[b])
                z = encoder_forward(batch, mask, self.encoders[b], dropout_p=0.0)
                parts.append(z.data)
            chunks.append(np.concatenate(parts, axis=1))
        return np.concatenate(chunks, axis=0) if chunks else np.zeros((0, self.cfg.embed_dim), np.float32)


def pad_stack(seqs: list[Tensor]) -> tuple[Tensor, np.ndarray]:
    """Stack variable-length (L_i, d) tensors into (B, Lmax, d) plus a pad
    mask; pad rows are zeros."""
    lmax = max(t.shape[0] for t in seqs)
    d = seqs[0].shape[1]
    rows = []
    mask = np.zeros((len(seqs), lmax), dtype=bool)
    for i, t in enumerate(seqs):
        L = t.shape[0]
        mask[i, :L] = True
        if L < lmax:
            t = ad.concat([t, Tensor(np.zeros((lmax - L, d), dtype=np.float32))], axis=0)
        rows.append(ad.reshape(t, (1, lmax, d)))
    return ad.concat(rows, axis=0), mask


def pad_stack_ids(ids: list[np.ndarray], embedder: TokenEmbedder) -> tuple[Tensor, np.ndarray]:
    """Pad id sequences with 0 (rows masked out) and embed as one batch."""
    lmax = max(len(a) for a in ids)
    mat = np.zeros((len(ids), lmax), dtype=np.int64)
    mask = np.zeros((len(ids), lmax), dtype=bool)
    for i, a in enumerate(ids):
        mat[i, :len(a)] = a
        mask[i, :len(a)] = True
    return embed_tokens(mat, embedder), mask
