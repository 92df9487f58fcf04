"""Reverse-mode autodiff over dense float32 numpy arrays.

Values are stored row-major in 32-bit floats. Reductions that feed losses
(sum, mean, logsumexp, softmax denominators) accumulate in 64-bit before
rounding back; matmul runs in the active dtype (BLAS). A module-level
compute-dtype switch lets the finite-difference gradient checker
re-evaluate entire losses in float64 (the analytic gradients under test
stay float32).

All randomness in the repo flows through `Rng` (numpy's PCG64 behind
`numpy.random.Generator`): one named algorithm, children derived via
SeedSequence spawn keys, identical seeds give identical draws.
"""

from __future__ import annotations

import hashlib
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import expit


class GradientError(ValueError):
    """Non-finite or structurally invalid gradient state."""


class DimensionError(ValueError):
    """Operand shapes incompatible for the requested operation."""


_ACTIVE_DTYPE = np.float32


@contextmanager
def compute_dtype(dtype):
    """Temporarily switch the compute/storage dtype of new tensors."""
    global _ACTIVE_DTYPE
    prev = _ACTIVE_DTYPE
    _ACTIVE_DTYPE = dtype
    try:
        yield
    finally:
        _ACTIVE_DTYPE = prev


def _arr(x) -> np.ndarray:
    return np.asarray(x, dtype=_ACTIVE_DTYPE)


def _d(t: "Tensor") -> np.ndarray:
    """Tensor data in the active compute dtype (no copy when it already is).

    Parameters persist in float32; when the gradient checker switches the
    engine to float64, this upcast is what makes re-evaluations actually
    run at the higher precision.
    """
    return t.data.astype(_ACTIVE_DTYPE, copy=False)


class Tensor:
    """A node in the reverse-mode graph.

    `data` is a numpy array in the active dtype. `grad` is allocated lazily
    during backward. Tensors produced by operations are treated as immutable.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _arr(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def _accum(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g.astype(self.data.dtype, copy=False)

    def backward(self) -> None:
        """Backpropagate from a scalar tensor."""
        if self.size != 1:
            raise GradientError(f"backward() requires a scalar, got shape {self.shape}")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward()

    # operator sugar -------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class Parameter:
    """Named trainable leaf: float32 value plus same-shape gradient slot.

    Adam moments (`m`, `v`) are attached on first optimizer use so that the
    checkpoint can persist them alongside the value.
    """

    def __init__(self, name: str, data):
        self.name = name
        self.tensor = Tensor(np.asarray(data, dtype=np.float32), requires_grad=True)
        self.m: np.ndarray | None = None
        self.v: np.ndarray | None = None

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    @data.setter
    def data(self, value) -> None:
        self.tensor.data = np.asarray(value, dtype=np.float32)

    @property
    def grad(self) -> np.ndarray | None:
        return self.tensor.grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.tensor.data.shape

    def zero_grad(self) -> None:
        self.tensor.grad = None

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


def _promote(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if isinstance(x, Parameter):
        return x.tensor
    return Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable[[Tensor], None]) -> Tensor:
    """Build an op output; records the tape node only if some parent needs grad."""
    out = Tensor(data)
    live = tuple(p for p in parents if p.requires_grad)
    if live:
        out.requires_grad = True
        out._parents = live
        out._backward = lambda: backward(out)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum gradient `g` down to `shape` (reversing numpy broadcasting)."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _promote(a), _promote(b)
    out_data = _d(a) + _d(b)

    def backward(out: Tensor) -> None:
        if a.requires_grad:
            a._accum(_unbroadcast(out.grad, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(out.grad, b.shape))

    return _make(out_data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _promote(a), _promote(b)
    out_data = _d(a) - _d(b)

    def backward(out: Tensor) -> None:
        if a.requires_grad:
            a._accum(_unbroadcast(out.grad, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(-out.grad, b.shape))

    return _make(out_data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _promote(a), _promote(b)
    out_data = _d(a) * _d(b)

    def backward(out: Tensor) -> None:
        if a.requires_grad:
            a._accum(_unbroadcast(out.grad * b.data, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(out.grad * a.data, b.shape))

    return _make(out_data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _promote(a), _promote(b)
    out_data = _d(a) / _d(b)

    def backward(out: Tensor) -> None:
        if a.requires_grad:
            a._accum(_unbroadcast(out.grad / b.data, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(-out.grad * a.data / (b.data * b.data), b.shape))

    return _make(out_data, (a, b), backward)


def exp(a) -> Tensor:
    a = _promote(a)
    out_data = np.exp(_d(a))

    def backward(out: Tensor) -> None:
        a._accum(out.grad * out.data)

    return _make(out_data, (a,), backward)


def log(a) -> Tensor:
    a = _promote(a)
    out_data = np.log(_d(a))

    def backward(out: Tensor) -> None:
        a._accum(out.grad / a.data)

    return _make(out_data, (a,), backward)


def cos(a) -> Tensor:
    a = _promote(a)
    out_data = np.cos(_d(a))

    def backward(out: Tensor) -> None:
        a._accum(-out.grad * np.sin(a.data))

    return _make(out_data, (a,), backward)


def sqrt(a) -> Tensor:
    a = _promote(a)
    out_data = np.sqrt(_d(a))

    def backward(out: Tensor) -> None:
        a._accum(out.grad * 0.5 / out.data)

    return _make(out_data, (a,), backward)


def silu(a) -> Tensor:
    """x * sigmoid(x); the repo-wide smooth rectifier."""
    a = _promote(a)
    s = expit(_d(a))
    out_data = _d(a) * s

    def backward(out: Tensor) -> None:
        a._accum(out.grad * (s + a.data * s * (1.0 - s)))

    return _make(out_data, (a,), backward)


def detach(a) -> Tensor:
    """Constant copy: blocks gradient flow."""
    a = _promote(a)
    return Tensor(a.data)


# ---------------------------------------------------------------------------
# reductions (64-bit accumulation)
# ---------------------------------------------------------------------------


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _promote(a)
    out_data = _d(a).sum(axis=axis, keepdims=keepdims, dtype=np.float64).astype(_ACTIVE_DTYPE)

    def backward(out: Tensor) -> None:
        g = out.grad
        if not keepdims and axis is not None:
            g = np.expand_dims(g, axis)
        a._accum(np.broadcast_to(g, a.shape))

    return _make(out_data, (a,), backward)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _promote(a)
    out_data = _d(a).mean(axis=axis, keepdims=keepdims, dtype=np.float64).astype(_ACTIVE_DTYPE)
    if axis is None:
        n = a.size
    else:
        n = a.shape[axis] if isinstance(axis, int) else int(np.prod([a.shape[i] for i in axis]))

    def backward(out: Tensor) -> None:
        g = out.grad
        if not keepdims and axis is not None:
            g = np.expand_dims(g, axis)
        a._accum(np.broadcast_to(g, a.shape) / n)

    return _make(out_data, (a,), backward)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


# below this output size, float32-mode matmul/softmax do their internal
# arithmetic in float64 and round once; large (desk-scale) tensors use the
# plain float32 BLAS path for throughput
F64_SMALL_LIMIT = 1 << 16


def matmul(a, b) -> Tensor:
    """Matrix product with broadcast batch dims.

    Small products accumulate in float64 then round (keeps gradient checks
    tight at tiny scale); large ones run in the active dtype via BLAS.
    """
    a, b = _promote(a), _promote(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dims differ: {a.shape} x {b.shape}")
    batch = np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    out_size = int(np.prod(batch + (a.shape[-2], b.shape[-1]), dtype=np.int64))
    precise = _ACTIVE_DTYPE == np.float32 and out_size <= F64_SMALL_LIMIT
    if precise:
        ad_ = a.data.astype(np.float64, copy=False)
        bd_ = b.data.astype(np.float64, copy=False)
        out_data = np.matmul(ad_, bd_).astype(np.float32)
    else:
        ad_, bd_ = _d(a), _d(b)
        out_data = np.matmul(ad_, bd_)

    def backward(out: Tensor) -> None:
        g = out.grad.astype(ad_.dtype, copy=False)
        if a.requires_grad:
            a._accum(_unbroadcast(np.matmul(g, bd_.swapaxes(-1, -2)), a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(np.matmul(ad_.swapaxes(-1, -2), g), b.shape))

    return _make(out_data, (a, b), backward)


# ---------------------------------------------------------------------------
# shape ops
# ---------------------------------------------------------------------------


def reshape(a, shape) -> Tensor:
    a = _promote(a)
    out_data = _d(a).reshape(shape)

    def backward(out: Tensor) -> None:
        a._accum(out.grad.reshape(a.shape))

    return _make(out_data, (a,), backward)


def transpose(a, axes) -> Tensor:
    a = _promote(a)
    out_data = _d(a).transpose(axes)
    inv = np.argsort(axes)

    def backward(out: Tensor) -> None:
        a._accum(out.grad.transpose(inv))

    return _make(out_data, (a,), backward)


def concat(tensors: Iterable, axis: int = 0) -> Tensor:
    parts = [_promote(t) for t in tensors]
    out_data = np.concatenate([_d(p) for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward(out: Tensor) -> None:
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                idx = [slice(None)] * out.grad.ndim
                idx[axis] = slice(lo, hi)
                p._accum(out.grad[tuple(idx)])

    return _make(out_data, parts, backward)


def take(a, idx) -> Tensor:
    """Indexing/slicing; duplicate fancy indices accumulate on backward."""
    a = _promote(a)
    out_data = _d(a)[idx]

    def backward(out: Tensor) -> None:
        g = np.zeros(a.shape, dtype=np.float64)
        np.add.at(g, idx, out.grad.astype(np.float64, copy=False))
        a._accum(g.astype(_ACTIVE_DTYPE))

    return _make(np.ascontiguousarray(out_data), (a,), backward)


def take_rows(table, ids: np.ndarray) -> Tensor:
    """Embedding lookup: table (vocab, d), ids int array -> ids.shape + (d,)."""
    t = _promote(table)
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= t.shape[0]):
        bad = int(ids.max() if ids.max() >= t.shape[0] else ids.min())
        raise IndexError(f"token id {bad} outside vocabulary of size {t.shape[0]}")
    out_data = _d(t)[ids]

    def backward(out: Tensor) -> None:
        g = np.zeros(t.shape, dtype=np.float64)
        np.add.at(g, ids.reshape(-1), out.grad.reshape(-1, t.shape[-1]).astype(np.float64, copy=False))
        t._accum(g.astype(_ACTIVE_DTYPE))

    return _make(out_data, (t,), backward)


# ---------------------------------------------------------------------------
# softmax family (row-stabilized, 64-bit accumulation)
# ---------------------------------------------------------------------------


def softmax_rows(a, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis; masked-out positions get probability 0.

    Row-max subtraction stabilizes; denominators accumulate in float64.
    `mask` is a boolean array broadcastable to `a` (True = valid). Rows with
    no valid position come out all-zero rather than NaN.
    """
    a = _promote(a)
    precise = _ACTIVE_DTYPE == np.float32 and a.size <= F64_SMALL_LIMIT
    z = a.data.astype(np.float64, copy=False) if precise else _d(a)
    dt = z.dtype.type
    if mask is not None:
        z = np.where(np.broadcast_to(mask, z.shape), z, dt(-np.inf))
    m = z.max(axis=-1, keepdims=True)
    m = np.where(np.isfinite(m), m, dt(0.0))
    e = np.exp(z - m)
    s = e.sum(axis=-1, keepdims=True, dtype=np.float64)
    s_safe = np.where(s == 0.0, 1.0, s).astype(z.dtype)
    p = e / s_safe
    out_data = p.astype(_ACTIVE_DTYPE)

    def backward(out: Tensor) -> None:
        g = out.grad.astype(p.dtype, copy=False)
        dot = (p * g).sum(axis=-1, keepdims=True, dtype=np.float64).astype(p.dtype)
        a._accum(p * (g - dot))

    return _make(out_data, (a,), backward)


def logsumexp(a, axis: int = -1) -> Tensor:
    """Stable log-sum-exp over one axis, computed in float64 then rounded."""
    a = _promote(a)
    z = a.data.astype(np.float64, copy=False)
    m = z.max(axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(z - m)
    s = e.sum(axis=axis, keepdims=True)
    lse = (m + np.log(s)).squeeze(axis)
    p64 = e / s

    def backward(out: Tensor) -> None:
        g = np.expand_dims(out.grad, axis).astype(np.float64, copy=False)
        a._accum((p64 * g).astype(_ACTIVE_DTYPE))

    return _make(lse.astype(_ACTIVE_DTYPE), (a,), backward)


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------

RMSNORM_EPS = 1e-6


def rmsnorm(x, gain, eps: float = RMSNORM_EPS) -> Tensor:
    """Divide each last-axis vector by its root mean square, scale by gain."""
    x = _promote(x)
    ms = mean(mul(x, x), axis=-1, keepdims=True)
    return mul(div(x, sqrt(add(ms, eps))), gain)


def l2_normalize(x, eps: float = 1e-12) -> Tensor:
    """Unit-normalize along the last axis (zero vectors stay zero)."""
    x = _promote(x)
    n = sqrt(add(sum_(mul(x, x), axis=-1, keepdims=True), eps))
    return div(x, n)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


def adam_step(params: Iterable[Parameter], lr: float, step: int,
              beta1: float = ADAM_BETA1, beta2: float = ADAM_BETA2,
              eps: float = ADAM_EPS) -> None:
    """In-place bias-corrected Adam update; zeroes gradients afterwards.

    `step` is 1-based. Parameters with no gradient are treated as zero-grad
    (moments still decay). Any non-finite gradient aborts before mutating.
    """
    params = list(params)
    for p in params:
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise GradientError(f"non-finite gradient in parameter {p.name!r}")
    for p in params:
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if p.m is None:
            p.m = np.zeros_like(p.data)
            p.v = np.zeros_like(p.data)
        p.m[...] = beta1 * p.m + (1.0 - beta1) * g
        p.v[...] = beta2 * p.v + (1.0 - beta2) * (g * g)
        m_hat = p.m / (1.0 - beta1 ** step)
        v_hat = p.v / (1.0 - beta2 ** step)
        p.data[...] -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(np.float32)
        p.zero_grad()


# ---------------------------------------------------------------------------
# finite-difference gradient checker
# ---------------------------------------------------------------------------


def gradient_check(loss_fn: Callable[[], Tensor], params: Iterable[Parameter],
                   h: float = 1e-3, rng: "Rng | None" = None,
                   sample: int = 32, full_below: int = 256) -> dict[str, float]:
    """Compare analytic gradients against central differences.

    Analytic gradients come from the production float32 backward pass; the
    numeric reference re-evaluates `loss_fn` in float64 compute mode at
    float32-representable perturbed points. Tensors with at most
    `full_below` entries are checked exhaustively, larger ones on `sample`
    entries drawn from `rng`. Returns {parameter name: max relative error}
    with denominator max(|analytic|, |numeric|, 1e-6).
    """
    params = list(params)
    if rng is None:
        rng = Rng(0)

    v1 = float(loss_fn().data)
    v2 = float(loss_fn().data)
    if v1 != v2:
        raise GradientError(f"loss_fn is non-deterministic: {v1!r} != {v2!r}")

    for p in params:
        p.zero_grad()
    loss = loss_fn()
    loss.backward()
    analytic = {p.name: (np.zeros_like(p.data) if p.grad is None else p.grad.copy()).astype(np.float64)
                for p in params}
    for p in params:
        p.zero_grad()

    report: dict[str, float] = {}
    with compute_dtype(np.float64):
        for p in params:
            flat = p.data.reshape(-1)
            n = flat.size
            if n <= full_below:
                entries = np.arange(n)
            else:
                entries = rng.gen.choice(n, size=min(sample, n), replace=False)
            worst = 0.0
            a_flat = analytic[p.name].reshape(-1)
            for i in entries:
                x0 = flat[i]
                xp = np.float32(np.float64(x0) + h)
                xm = np.float32(np.float64(x0) - h)
                flat[i] = xp
                fp = float(loss_fn().data)
                flat[i] = xm
                fm = float(loss_fn().data)
                flat[i] = x0
                numeric = (fp - fm) / (np.float64(xp) - np.float64(xm))
                a = a_flat[i]
                err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-6)
                worst = max(worst, float(err))
            report[p.name] = worst
    return report


# ---------------------------------------------------------------------------
# rng
# ---------------------------------------------------------------------------


def _tag_words(tag) -> tuple[int, ...]:
    if isinstance(tag, (int, np.integer)):
        v = int(tag)
        if v < 0:
            raise ValueError("rng tags must be non-negative")
        return (v & 0xFFFFFFFF, v >> 32)
    digest = hashlib.sha256(str(tag).encode("utf-8")).digest()
    return (int.from_bytes(digest[:4], "little"), int.from_bytes(digest[4:8], "little"))


class Rng:
    """Deterministic random source: PCG64 under numpy.random.Generator.

    Children are derived from (seed, spawn key) so independent subsystems
    (masking per branch/view, init, shuffling, queue seeding) get
    non-overlapping streams from one root seed.
    """

    def __init__(self, seed: int, _key: tuple[int, ...] = ()):
        self.seed = int(seed)
        self._key = _key
        self._gen: np.random.Generator | None = None

    @property
    def gen(self) -> np.random.Generator:
        if self._gen is None:
            ss = np.random.SeedSequence(entropy=self.seed, spawn_key=self._key)
            self._gen = np.random.Generator(np.random.PCG64(ss))
        return self._gen

    def child(self, *tags) -> "Rng":
        key = self._key
        for t in tags:
            key = key + _tag_words(t)
        return Rng(self.seed, key)

    # thin forwarding helpers
    def normal(self, scale: float, size) -> np.ndarray:
        return self.gen.normal(0.0, scale, size=size)

    def uniform(self, low: float, high: float, size=None):
        return self.gen.uniform(low, high, size=size)

    def integers(self, low: int, high: int, size=None):
        return self.gen.integers(low, high, size=size)

    def random(self, size=None):
        return self.gen.random(size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self.gen.permutation(n)

    def __repr__(self):
        return f"Rng(seed={self.seed}, key={self._key})"
