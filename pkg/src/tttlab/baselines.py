"""Comparison layers: masked softmax attention and two matrix-state RNNs.

* ``softmax_attention`` with full, segment-local or sliding-window masks.
  Masks are stored as one admissible column interval per row, and the
  attention is evaluated in row blocks so banded masks cost O(T).
* ``linear_attn_scan``: decayed linear attention, ``S_t = a_t S_{t-1} + v_t k_t^T``
  (a stand-in for Mamba-2's matrix state).
* ``gated_delta_scan``: ``S_t = a_t S_{t-1}(I - b_t k_t k_t^T) + b_t v_t k_t^T``
  with unit-norm keys (a stand-in for Gated DeltaNet).
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .ttt import GATE_INIT, merge_heads, split_heads

DECAY_MIN = 1e-4
FULL_SCALE_WINDOW = 8192


@dataclass(frozen=True)
class AttentionMask:
    """Row ``t`` admits columns ``lo[t] <= s < hi[t]``."""

    lo: np.ndarray
    hi: np.ndarray
    kind: str = "custom"

    def __post_init__(self):
        lo, hi = np.asarray(self.lo, dtype=np.int64), np.asarray(self.hi, dtype=np.int64)
        if lo.shape != hi.shape or lo.ndim != 1:
            raise ValueError("mask intervals must be 1-D arrays of equal length")
        if np.any(hi <= lo):
            bad = int(np.argmax(hi <= lo))
            raise ValueError(f"mask row {bad} admits no column")
        if lo.size and (lo.min() < 0 or hi.max() > lo.size):
            raise ValueError("mask interval outside [0, T)")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def T(self) -> int:
        return int(self.lo.size)

    @property
    def is_full(self) -> bool:
        return bool(np.all(self.lo == 0) and np.all(self.hi == self.T))

    def block(self, r0: int, r1: int, c0: int, c1: int) -> np.ndarray:
        cols = np.arange(c0, c1)
        return (cols[None, :] >= self.lo[r0:r1, None]) & (cols[None, :] < self.hi[r0:r1, None])

    def dense(self) -> np.ndarray:
        return self.block(0, self.T, 0, self.T)

    def is_symmetric(self) -> bool:
        m = self.dense()
        return bool(np.array_equal(m, m.T))


def full_mask(T: int) -> AttentionMask:
    return AttentionMask(np.zeros(T, int), np.full(T, T), kind="full")


def build_sliding_window_mask(T: int, w: int = FULL_SCALE_WINDOW) -> AttentionMask:
    """Symmetric band: row t admits |t - s| <= w // 2."""
    if w < 1:
        raise ValueError("window must be >= 1")
    t = np.arange(T)
    half = w // 2
    return AttentionMask(np.maximum(0, t - half), np.minimum(T, t + half + 1), kind="sliding")


def segment_mask(T: int, segment_len: int) -> AttentionMask:
    """Block-diagonal mask over consecutive segments of ``segment_len`` tokens (last may be short)."""
    if segment_len < 1:
        raise ValueError("segment length must be >= 1")
    t = np.arange(T)
    lo = (t // segment_len) * segment_len
    return AttentionMask(lo, np.minimum(T, lo + segment_len), kind="local")


# -- softmax attention ---------------------------------------------------------

@dataclass
class AttentionParams:
    Wq: Tensor
    Wk: Tensor
    Wv: Tensor
    Wo: Tensor
    heads: int = 1

    def named(self, prefix: str = "") -> dict[str, Tensor]:
        return {prefix + n: getattr(self, n) for n in ("Wq", "Wk", "Wv", "Wo")}

    def with_tensors(self, tensors, prefix: str = "") -> "AttentionParams":
        return AttentionParams(*(tensors[prefix + n] for n in ("Wq", "Wk", "Wv", "Wo")), heads=self.heads)


def init_attention_params(d: int, k: Optional[int] = None, heads: int = 1, rng=None,
                          requires_grad: bool = True) -> AttentionParams:
    rng = rng or np.random.default_rng(0)
    k = k or d
    s = 1.0 / np.sqrt(d)
    t = lambda shape, std, n: Tensor(rng.normal(0, std, shape), requires_grad=requires_grad, name=n)
    return AttentionParams(t((k, d), s, "Wq"), t((k, d), s, "Wk"), t((k, d), s, "Wv"),
                           t((d, k), 1.0 / np.sqrt(k), "Wo"), heads=heads)


def _row_blocks(mask: AttentionMask, block: int):
    T = mask.T
    if mask.is_full:
        yield 0, T, 0, T
        return
    for r0 in range(0, T, block):
        r1 = min(T, r0 + block)
        yield r0, r1, int(mask.lo[r0:r1].min()), int(mask.hi[r0:r1].max())


def softmax_attention(X: Tensor, params: AttentionParams, mask: Optional[AttentionMask] = None,
                      block: int = 64) -> Tensor:
    """Non-causal softmax attention restricted to ``mask``."""
    X = ad.as_tensor(X)
    T = X.shape[-2]
    mask = mask or full_mask(T)
    if mask.T != T:
        raise ValueError(f"attention mask is for {mask.T} tokens, input has {T}")
    h = params.heads
    q = split_heads(ad.matmul(X, ad.transpose(params.Wq)), h)
    k = split_heads(ad.matmul(X, ad.transpose(params.Wk)), h)
    v = split_heads(ad.matmul(X, ad.transpose(params.Wv)), h)
    sc = 1.0 / np.sqrt(q.shape[-1])
    outs = []
    for r0, r1, c0, c1 in _row_blocks(mask, block):
        rows = (Ellipsis, slice(r0, r1), slice(None))
        cols = (Ellipsis, slice(c0, c1), slice(None))
        s = ad.scale(ad.matmul(q[rows], ad.transpose(k[cols])), sc)
        sub = None if mask.is_full else mask.block(r0, r1, c0, c1)
        outs.append(ad.matmul(ad.masked_softmax(s, sub), v[cols]))
    o = outs[0] if len(outs) == 1 else ad.concat(outs, axis=-2)
    return ad.matmul(merge_heads(o), ad.transpose(params.Wo))


def attention_weights(X, params: AttentionParams, mask: Optional[AttentionMask] = None) -> np.ndarray:
    """Dense ``(..., heads, T, T)`` attention probabilities (zero outside the mask)."""
    X = ad.as_tensor(X)
    T = X.shape[-2]
    mask = mask or full_mask(T)
    q = split_heads(ad.matmul(X, ad.transpose(params.Wq)), params.heads)
    k = split_heads(ad.matmul(X, ad.transpose(params.Wk)), params.heads)
    s = ad.scale(ad.matmul(q, ad.transpose(k)), 1.0 / np.sqrt(q.shape[-1]))
    return ad.masked_softmax(s, mask.dense()).data


class Attention:
    """Callable attention operator bound to parameters and a mask."""

    def __init__(self, params: AttentionParams, mask: Optional[AttentionMask] = None, block: int = 64):
        self.params = params
        self.mask = mask
        self.block = block

    def __call__(self, X):
        return softmax_attention(X, self.params, self.mask, self.block)


# -- matrix-state recurrences --------------------------------------------------

@dataclass
class RecurrentParams:
    """Projections plus per-token gate maps for the matrix-state baselines.

    ``w_beta``/``b_beta`` are only used by the delta rule. ``alpha``/``beta`` are
    the block-level gates used when the layer sits inside ``modified_block``.
    """

    Wq: Tensor
    Wk: Tensor
    Wv: Tensor
    Wo: Tensor
    w_decay: Tensor
    b_decay: Tensor
    w_beta: Tensor
    b_beta: Tensor
    alpha: Tensor
    beta: Tensor

    def named(self, prefix: str = "") -> dict[str, Tensor]:
        return {prefix + f.name: getattr(self, f.name) for f in fields(self)}

    def with_tensors(self, tensors, prefix: str = "") -> "RecurrentParams":
        return RecurrentParams(**{f.name: tensors[prefix + f.name] for f in fields(self)})


def init_recurrent_params(d: int, k: Optional[int] = None, rng=None, requires_grad: bool = True,
                          decay_bias: float = 3.0) -> RecurrentParams:
    rng = rng or np.random.default_rng(0)
    k = k or d
    s = 1.0 / np.sqrt(d)
    t = lambda a, n: Tensor(a, requires_grad=requires_grad, name=n)
    return RecurrentParams(
        Wq=t(rng.normal(0, s, (k, d)), "Wq"), Wk=t(rng.normal(0, s, (k, d)), "Wk"),
        Wv=t(rng.normal(0, s, (k, d)), "Wv"), Wo=t(rng.normal(0, 0.02, (d, k)), "Wo"),
        w_decay=t(rng.normal(0, 0.02, (d, 1)), "w_decay"), b_decay=t(np.full(1, decay_bias), "b_decay"),
        w_beta=t(rng.normal(0, 0.02, (d, 1)), "w_beta"), b_beta=t(np.zeros(1), "b_beta"),
        alpha=t(np.full(d, GATE_INIT), "alpha"), beta=t(np.full(d, GATE_INIT), "beta"),
    )


def _step_slice(x, t):
    return x[..., t:t + 1, :]


def linear_attn_recurrence(q: Tensor, k: Tensor, v: Tensor, a: Tensor) -> Tensor:
    """``M_t = a_t M_{t-1} + k_t^T v_t``, ``z_t = q_t M_t`` (``M`` is the transposed state)."""
    T = q.shape[-2]
    M = None
    outs = []
    for t in range(T):
        kt, vt, at = _step_slice(k, t), _step_slice(v, t), _step_slice(a, t)
        write = ad.matmul(ad.transpose(kt), vt)
        M = write if M is None else ad.add(ad.mul(at, M), write)
        outs.append(ad.matmul(_step_slice(q, t), M))
    return ad.concat(outs, axis=-2)


def gated_delta_recurrence(q: Tensor, k: Tensor, v: Tensor, a: Tensor, beta: Tensor) -> Tensor:
    """``M_t = a_t (M - b_t k_t^T (k_t M)) + b_t k_t^T v_t``, ``z_t = q_t M_t``."""
    *lead, T, dk = q.shape
    M = Tensor(np.zeros((*lead, dk, v.shape[-1])))
    outs = []
    for t in range(T):
        kt, vt, at, bt = _step_slice(k, t), _step_slice(v, t), _step_slice(a, t), _step_slice(beta, t)
        ktT = ad.transpose(kt)
        erase = ad.mul(bt, ad.matmul(ktT, ad.matmul(kt, M)))
        M = ad.add(ad.mul(at, ad.sub(M, erase)), ad.mul(bt, ad.matmul(ktT, vt)))
        outs.append(ad.matmul(_step_slice(q, t), M))
    return ad.concat(outs, axis=-2)


def decay_gate(X: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Per-token decay in [1e-4, 1]: clamped sigmoid of an affine map of the token."""
    return ad.clamp(ad.sigmoid(ad.add(ad.matmul(X, w), b)), DECAY_MIN, 1.0)


def normalize_rows(x: Tensor, eps: float = 1e-12) -> Tensor:
    return ad.mul(x, ad.power(ad.add(ad.tsum(ad.mul(x, x), -1, keepdims=True), eps), -0.5))


def _qkv(X, p: RecurrentParams):
    proj = lambda W: ad.matmul(X, ad.transpose(W))
    return proj(p.Wq), proj(p.Wk), proj(p.Wv)


def linear_attn_scan(X: Tensor, params: RecurrentParams) -> Tensor:
    X = ad.as_tensor(X)
    q, k, v = _qkv(X, params)
    a = decay_gate(X, params.w_decay, params.b_decay)
    return ad.matmul(linear_attn_recurrence(q, k, v, a), ad.transpose(params.Wo))


def gated_delta_scan(X: Tensor, params: RecurrentParams) -> Tensor:
    X = ad.as_tensor(X)
    q, k, v = _qkv(X, params)
    a = decay_gate(X, params.w_decay, params.b_decay)
    beta = ad.sigmoid(ad.add(ad.matmul(X, params.w_beta), params.b_beta))
    z = gated_delta_recurrence(q, normalize_rows(k), v, a, beta)
    return ad.matmul(z, ad.transpose(params.Wo))
