"""Branch encoders: token embedding tables, a pre-norm transformer with
rotary position embeddings and RMSNorm, masked mean pooling, EMA-shadowed
anchor/target parameter pairs, and the contrastive projection heads.

The grid and road branches look tokens up in trainable tables; the
spatio-temporal branch feeds its fused feature sequence straight in. All
branches share this encoder architecture at their own width.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Rng, Tensor

ROPE_BASE = 10000.0
EMBED_INIT_STD = 0.02


class ContractViolation(ValueError):
    """Caller broke an operation precondition."""


# ---------------------------------------------------------------------------
# token embedding
# ---------------------------------------------------------------------------


@dataclass
class TokenEmbedder:
    table: Parameter  # (vocab, d_b)

    @property
    def vocab(self) -> int:
        return self.table.shape[0]

    @property
    def dim(self) -> int:
        return self.table.shape[1]

    def parameters(self) -> list[Parameter]:
        return [self.table]


def init_embedder(prefix: str, vocab: int, dim: int, rng: Rng) -> TokenEmbedder:
    return TokenEmbedder(Parameter(f"{prefix}.table",
                                   rng.child("table").normal(EMBED_INIT_STD, (vocab, dim))))


def load_embedding_table(path, vocab: int, dim: int) -> np.ndarray:
    """Hook for externally pretrained tables: a .npy array of vocab x dim."""
    arr = np.load(path)
    if arr.shape != (vocab, dim):
        raise ContractViolation(f"embedding table shape {arr.shape} != ({vocab}, {dim})")
    return arr.astype(np.float32)


def embed_tokens(ids: np.ndarray, embedder: TokenEmbedder) -> Tensor:
    """Row lookups, differentiable into the table. ids (...,) -> (..., d)."""
    return ad.take_rows(embedder.table, np.asarray(ids, dtype=np.int64))


# ---------------------------------------------------------------------------
# rotary position embedding
# ---------------------------------------------------------------------------


def rope_tables(positions: np.ndarray, head_dim: int) -> tuple[np.ndarray, np.ndarray]:
    """cos/sin tables (L, head_dim/2) at omega_i = base^(-2i/head_dim)."""
    if head_dim % 2 != 0:
        raise ContractViolation(f"RoPE needs an even head dim, got {head_dim}")
    half = head_dim // 2
    omega = ROPE_BASE ** (-2.0 * np.arange(half) / head_dim)
    angles = np.asarray(positions, dtype=np.float64)[:, None] * omega[None, :]
    return np.cos(angles).astype(np.float32), np.sin(angles).astype(np.float32)


def rope_rotate(x, positions: np.ndarray) -> Tensor:
    """Rotate consecutive coordinate pairs (x_2i, x_2i+1) of the last axis by
    position * omega_i. x is (..., L, head_dim); broadcast over leading axes."""
    x = ad._promote(x)
    head_dim = x.shape[-1]
    L = x.shape[-2]
    cos_t, sin_t = rope_tables(positions, head_dim)
    half = head_dim // 2
    paired = ad.reshape(x, x.shape[:-1] + (half, 2))
    xe = paired[..., 0]
    xo = paired[..., 1]
    re = ad.sub(ad.mul(xe, cos_t), ad.mul(xo, sin_t))
    ro = ad.add(ad.mul(xe, sin_t), ad.mul(xo, cos_t))
    stacked = ad.concat([ad.reshape(re, re.shape + (1,)), ad.reshape(ro, ro.shape + (1,))], axis=-1)
    return ad.reshape(stacked, x.shape)


# ---------------------------------------------------------------------------
# transformer encoder
# ---------------------------------------------------------------------------


@dataclass
class EncoderLayerParams:
    wq: Parameter
    wk: Parameter
    wv: Parameter
    wo: Parameter
    w1: Parameter
    w2: Parameter
    gain_attn: Parameter
    gain_ffn: Parameter

    def parameters(self) -> list[Parameter]:
        return [self.wq, self.wk, self.wv, self.wo, self.w1, self.w2,
                self.gain_attn, self.gain_ffn]


@dataclass
class EncoderParams:
    layers: list[EncoderLayerParams]
    gain_final: Parameter
    heads: int
    use_rope: bool = True

    @property
    def dim(self) -> int:
        return self.layers[0].wq.shape[0]

    def parameters(self) -> list[Parameter]:
        out: list[Parameter] = []
        for layer in self.layers:
            out.extend(layer.parameters())
        out.append(self.gain_final)
        return out


def init_encoder_params(prefix: str, dim: int, n_layers: int, heads: int,
                        rng: Rng, ffn_ratio: int = 4, use_rope: bool = True) -> EncoderParams:
    if dim % heads != 0:
        raise ContractViolation(f"encoder width {dim} not divisible by {heads} heads")
    if (dim // heads) % 2 != 0:
        raise ContractViolation(f"head dim {dim // heads} must be even for RoPE")
    s_attn = 1.0 / math.sqrt(dim)
    s_ffn = 1.0 / math.sqrt(ffn_ratio * dim)
    layers = []
    for i in range(n_layers):
        r = rng.child("layer", i)
        layers.append(EncoderLayerParams(
            wq=Parameter(f"{prefix}.layer{i}.wq", r.child("wq").normal(s_attn, (dim, dim))),
            wk=Parameter(f"{prefix}.layer{i}.wk", r.child("wk").normal(s_attn, (dim, dim))),
            wv=Parameter(f"{prefix}.layer{i}.wv", r.child("wv").normal(s_attn, (dim, dim))),
            wo=Parameter(f"{prefix}.layer{i}.wo", r.child("wo").normal(s_attn, (dim, dim))),
            w1=Parameter(f"{prefix}.layer{i}.w1", r.child("w1").normal(s_attn, (dim, ffn_ratio * dim))),
            w2=Parameter(f"{prefix}.layer{i}.w2", r.child("w2").normal(s_ffn, (ffn_ratio * dim, dim))),
            gain_attn=Parameter(f"{prefix}.layer{i}.gain_attn", np.ones(dim, dtype=np.float32)),
            gain_ffn=Parameter(f"{prefix}.layer{i}.gain_ffn", np.ones(dim, dtype=np.float32)),
        ))
    return EncoderParams(
        layers=layers,
        gain_final=Parameter(f"{prefix}.gain_final", np.ones(dim, dtype=np.float32)),
        heads=heads,
        use_rope=use_rope,
    )


def _dropout(x: Tensor, p: float, rng: Rng | None) -> Tensor:
    if p <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= p).astype(np.float32) / (1.0 - p)
    return ad.mul(x, keep)


def encoder_forward(tokens, pad_mask: np.ndarray, params: EncoderParams,
                    dropout_p: float = 0.0, rng: Rng | None = None,
                    collect_logits: list | None = None) -> Tensor:
    """Pre-norm transformer over a padded batch, mean-pooled per example.

    tokens (B, L, d), pad_mask (B, L) bool (True = real token). Each layer:
    x += MHA(RMSNorm(x)) with RoPE on q/k and padded keys excluded, then
    x += FFN(RMSNorm(x)); final RMSNorm; mean over non-pad positions.
    Returns (B, d). When `collect_logits` is a list, each layer's raw
    attention logits (B, H, L, L) are appended to it.
    """
    x = ad._promote(tokens)
    B, L, d = x.shape
    mask = np.asarray(pad_mask, dtype=bool)
    counts = mask.sum(axis=1)
    if np.any(counts == 0):
        raise ContractViolation("an example has every position padded")
    H = params.heads
    dh = d // H
    positions = np.arange(L)
    key_mask = mask[:, None, None, :]
    for li, layer in enumerate(params.layers):
        xn = ad.rmsnorm(x, layer.gain_attn.tensor)
        q = ad.matmul(xn, layer.wq.tensor)
        k = ad.matmul(xn, layer.wk.tensor)
        v = ad.matmul(xn, layer.wv.tensor)
        q = ad.transpose(ad.reshape(q, (B, L, H, dh)), (0, 2, 1, 3))
        k = ad.transpose(ad.reshape(k, (B, L, H, dh)), (0, 2, 1, 3))
        v = ad.transpose(ad.reshape(v, (B, L, H, dh)), (0, 2, 1, 3))
        if params.use_rope:
            q = rope_rotate(q, positions)
            k = rope_rotate(k, positions)
        logits = ad.mul(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
        if collect_logits is not None:
            collect_logits.append(logits.data.copy())
        probs = ad.softmax_rows(logits, mask=key_mask)
        att = ad.matmul(probs, v)
        att = ad.reshape(ad.transpose(att, (0, 2, 1, 3)), (B, L, d))
        o = ad.matmul(att, layer.wo.tensor)
        x = ad.add(x, _dropout(o, dropout_p, rng.child("attn", li) if rng else None))
        xn = ad.rmsnorm(x, layer.gain_ffn.tensor)
        h = ad.matmul(ad.silu(ad.matmul(xn, layer.w1.tensor)), layer.w2.tensor)
        x = ad.add(x, _dropout(h, dropout_p, rng.child("ffn", li) if rng else None))
    x = ad.rmsnorm(x, params.gain_final.tensor)
    maskf = mask[:, :, None].astype(np.float32)
    pooled = ad.sum_(ad.mul(x, maskf), axis=1)
    return ad.div(pooled, counts[:, None].astype(np.float32))


# ---------------------------------------------------------------------------
# projection heads
# ---------------------------------------------------------------------------


@dataclass
class ProjectionHead:
    """Two affine maps with a SiLU between; used only during training."""

    w1: Parameter
    b1: Parameter
    w2: Parameter
    b2: Parameter

    @property
    def out_dim(self) -> int:
        return self.w2.shape[1]

    def parameters(self) -> list[Parameter]:
        return [self.w1, self.b1, self.w2, self.b2]


def init_projection_head(prefix: str, dim: int, out_dim: int, rng: Rng) -> ProjectionHead:
    s = 1.0 / math.sqrt(dim)
    return ProjectionHead(
        w1=Parameter(f"{prefix}.w1", rng.child("w1").normal(s, (dim, dim))),
        b1=Parameter(f"{prefix}.b1", np.zeros(dim, dtype=np.float32)),
        w2=Parameter(f"{prefix}.w2", rng.child("w2").normal(s, (dim, out_dim))),
        b2=Parameter(f"{prefix}.b2", np.zeros(out_dim, dtype=np.float32)),
    )


def project(z, head: ProjectionHead) -> Tensor:
    h = ad.silu(ad.add(ad.matmul(z, head.w1.tensor), head.b1.tensor))
    return ad.add(ad.matmul(h, head.w2.tensor), head.b2.tensor)


# ---------------------------------------------------------------------------
# EMA anchor/target pairs
# ---------------------------------------------------------------------------


@dataclass
class EmaPair:
    """Anchor parameters train by gradient; targets shadow them via EMA and
    never allocate gradients (structurally frozen)."""

    anchor: list[Parameter]
    target: list[Parameter]
    mu: float


def clone_frozen(params: list[Parameter], prefix: str = "target.") -> list[Parameter]:
    out = []
    for p in params:
        c = Parameter(prefix + p.name, p.data.copy())
        c.tensor.requires_grad = False
        out.append(c)
    return out


def make_ema_pair(anchor: list[Parameter], mu: float) -> EmaPair:
    return EmaPair(anchor=anchor, target=clone_frozen(anchor), mu=mu)


def ema_update(pair: EmaPair) -> None:
    """target <- mu * target + (1 - mu) * anchor, elementwise in place.
    The mu endpoints short-circuit so they are bit-exact."""
    mu = pair.mu
    if mu == 1.0:
        return
    for a, t in zip(pair.anchor, pair.target):
        if mu == 0.0:
            t.data[...] = a.data
        else:
            t.data[...] = np.float32(mu) * t.data + np.float32(1.0 - mu) * a.data
