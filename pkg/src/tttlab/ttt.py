"""TTT layers: a sequence layer whose hidden state is the weight set of a small model.

For every token the hidden state ``W`` takes a gradient step on the
reconstruction loss ``|| f(theta_K x; W) - theta_V x ||^2`` and the layer emits
``theta_O f(theta_Q x; W)``. ``f`` is ``u + LN(core(u; W))`` where ``core`` is a
linear map (TTT-Linear) or a two-layer GELU MLP (TTT-MLP).

Tokens use the row-vector convention: a batch of per-head inputs ``U`` has
shape ``(..., heads, n, k/heads)`` and ``core(U) = U @ W`` (linear) or
``gelu(U @ W1) @ W2`` (MLP).
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from typing import Callable, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

DEFAULT_ETA = {"linear": 1.0, "mlp": 0.1}
GATE_INIT = 0.1


@dataclass(frozen=True)
class TTTConfig:
    d: int
    k: Optional[int] = None
    variant: str = "mlp"
    hidden_mult: int = 4
    b: int = 64
    eta: Optional[float] = None
    heads: int = 1
    ln_eps: float = 1e-6

    def __post_init__(self):
        if self.k is None:
            object.__setattr__(self, "k", self.d)
        if self.eta is None:
            object.__setattr__(self, "eta", DEFAULT_ETA.get(self.variant, 0.1))
        if self.variant not in ("linear", "mlp"):
            raise ValueError(f"unknown TTT variant {self.variant!r}")
        if not (self.d >= self.k >= 1):
            raise ValueError(f"need d >= k >= 1, got d={self.d}, k={self.k}")
        if self.b < 1 or self.heads < 1 or self.hidden_mult < 1:
            raise ValueError("b, heads and hidden_mult must be positive")
        if self.k % self.heads:
            raise ValueError(f"k={self.k} is not divisible by heads={self.heads}")
        if self.eta < 0:
            raise ValueError("eta must be non-negative")

    @property
    def head_dim(self) -> int:
        return self.k // self.heads

    @property
    def hidden(self) -> int:
        """Per-head hidden width of the MLP state."""
        return self.hidden_mult * self.head_dim


@dataclass
class TTTParams:
    """Outer-loop parameters of one TTT layer (shared by both scan directions)."""

    theta_K: Tensor
    theta_V: Tensor
    theta_Q: Tensor
    theta_O: Tensor
    W0: tuple
    ln_gain: Tensor
    ln_bias: Tensor
    alpha: Tensor
    beta: Tensor

    def named(self, prefix: str = "") -> dict[str, Tensor]:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "W0":
                for i, w in enumerate(v):
                    out[f"{prefix}W0_{i}"] = w
            else:
                out[prefix + f.name] = v
        return out

    def with_tensors(self, tensors: dict[str, Tensor], prefix: str = "") -> "TTTParams":
        kw = {}
        for f in fields(self):
            if f.name == "W0":
                kw["W0"] = tuple(tensors[f"{prefix}W0_{i}"] for i in range(len(self.W0)))
            else:
                kw[f.name] = tensors[prefix + f.name]
        return TTTParams(**kw)


def init_ttt_params(cfg: TTTConfig, rng: np.random.Generator, requires_grad: bool = True,
                    state_std: float = 0.02) -> TTTParams:
    d, k, h, kh = cfg.d, cfg.k, cfg.heads, cfg.head_dim

    def t(a, name):
        return Tensor(a, requires_grad=requires_grad, name=name)

    proj = 1.0 / np.sqrt(d)
    if cfg.variant == "linear":
        W0 = (t(rng.normal(0, state_std, (h, kh, kh)), "W0_0"),)
    else:
        W0 = (t(rng.normal(0, state_std, (h, kh, cfg.hidden)), "W0_0"),
              t(rng.normal(0, state_std, (h, cfg.hidden, kh)), "W0_1"))
    return TTTParams(
        theta_K=t(rng.normal(0, proj, (k, d)), "theta_K"),
        theta_V=t(rng.normal(0, proj, (k, d)), "theta_V"),
        theta_Q=t(rng.normal(0, proj, (k, d)), "theta_Q"),
        theta_O=t(rng.normal(0, 0.02, (d, k)), "theta_O"),
        W0=W0,
        ln_gain=t(np.ones((h, kh)), "ln_gain"),
        ln_bias=t(np.zeros((h, kh)), "ln_bias"),
        alpha=t(np.full(d, GATE_INIT), "alpha"),
        beta=t(np.full(d, GATE_INIT), "beta"),
    )


# -- per-token model f ---------------------------------------------------------

def split_heads(U: Tensor, heads: int) -> Tensor:
    """``(..., n, k)`` -> ``(..., heads, n, k/heads)``."""
    *lead, n, k = U.shape
    return ad.swapaxes(ad.reshape(U, (*lead, n, heads, k // heads)), -3, -2)


def merge_heads(U: Tensor) -> Tensor:
    """``(..., heads, n, kh)`` -> ``(..., n, heads*kh)``."""
    *lead, h, n, kh = U.shape
    return ad.reshape(ad.swapaxes(U, -3, -2), (*lead, n, h * kh))


def core(U: Tensor, state: Sequence[Tensor], variant: str) -> Tensor:
    if variant == "linear":
        (W,) = state
        return ad.matmul(U, W)
    W1, W2 = state
    return ad.matmul(ad.gelu(ad.matmul(U, W1)), W2)


def wrapper_f(U: Tensor, state: Sequence[Tensor], params: TTTParams, cfg: TTTConfig) -> Tensor:
    """``u + LN(core(u; W))`` for per-head inputs ``U`` of shape ``(..., h, n, kh)``."""
    if U.shape[-1] != cfg.head_dim:
        raise ValueError(f"wrapper_f: input width {U.shape[-1]} != head width {cfg.head_dim}")
    first = state[0]
    if first.shape[-2] != cfg.head_dim:
        raise ValueError(f"wrapper_f: state shape {first.shape} does not accept width {cfg.head_dim}")
    h, kh = cfg.heads, cfg.head_dim
    gain = ad.reshape(params.ln_gain, (h, 1, kh))
    bias = ad.reshape(params.ln_bias, (h, 1, kh))
    return ad.add(U, ad.layer_norm(core(U, state, cfg.variant), gain, bias, cfg.ln_eps))


def project(X: Tensor, params: TTTParams, cfg: TTTConfig):
    """Per-head ``(U, V, Q)`` = (theta_K x, theta_V x, theta_Q x) for every token of ``X``."""
    X = ad.as_tensor(X)
    if X.shape[-1] != cfg.d:
        raise ValueError(f"TTT input width {X.shape[-1]} != d={cfg.d}")
    if X.ndim == 1:
        X = ad.reshape(X, (1, cfg.d))
    proj = lambda theta: split_heads(ad.matmul(X, ad.transpose(theta)), cfg.heads)
    return proj(params.theta_K), proj(params.theta_V), proj(params.theta_Q)


def _loss(state, U, V, params, cfg) -> Tensor:
    return ad.squared_error(wrapper_f(U, state, params, cfg), V)


def inner_loss(state: Sequence[Tensor], x: Tensor, params: TTTParams, cfg: TTTConfig) -> Tensor:
    """Reconstruction loss of token(s) ``x``, summed over tokens and heads."""
    U, V, _ = project(x, params, cfg)
    return _loss(state, U, V, params, cfg)


def _step(state, U, V, params, cfg, lr) -> tuple:
    gs = ad.grad(_loss(state, U, V, params, cfg), state)
    return tuple(ad.sub(w, ad.scale(g, lr)) for w, g in zip(state, gs))


def inner_grad(state: Sequence[Tensor], x: Tensor, params: TTTParams, cfg: TTTConfig) -> list[Tensor]:
    state = _trainable(state)
    return ad.grad(inner_loss(state, x, params, cfg), state)


def inner_step(state: Sequence[Tensor], x: Tensor, params: TTTParams, cfg: TTTConfig,
               eta: Optional[float] = None) -> tuple:
    """One gradient step ``W - eta * grad_W loss(W; x)`` (loss summed if ``x`` holds several tokens)."""
    eta = cfg.eta if eta is None else eta
    U, V, _ = project(x, params, cfg)
    return _step(_trainable(state), U, V, params, cfg, eta)


def _trainable(state):
    return tuple(w if w.requires_grad else Tensor(w.data, requires_grad=True) for w in state)


def initial_state(params: TTTParams, lead: tuple) -> tuple:
    """``W0`` broadcast to one private copy per sequence in the leading batch axes."""
    out = []
    for w in params.W0:
        if not w.requires_grad:
            out.append(Tensor(np.broadcast_to(w.data, (*lead, *w.shape)).copy(), requires_grad=True))
            continue
        # always a fresh node: the inner gradient is taken w.r.t. the state alone,
        # even when the layer input itself depends on W0 (stacked or reversed scans)
        out.append(ad.broadcast_to(w, (*lead, *w.shape)) if lead else ad.reshape(w, w.shape))
    return tuple(out)


def _output(Qb, state, params, cfg) -> Tensor:
    return ad.matmul(merge_heads(wrapper_f(Qb, state, params, cfg)), ad.transpose(params.theta_O))


def _outer_requires_grad(params: TTTParams) -> bool:
    return any(t.requires_grad for t in params.named().values())


def _cut(state, keep_graph):
    if keep_graph:
        return state
    return tuple(Tensor(w.data, requires_grad=True) for w in state)


def scan_sequential(X: Tensor, params: TTTParams, cfg: TTTConfig) -> Tensor:
    """Reference scan: one inner step per token, output from the updated state."""
    X = ad.as_tensor(X)
    T = X.shape[-2]
    if T < 1:
        raise ValueError("scan needs at least one token")
    U, V, Q = project(X, params, cfg)
    state = initial_state(params, X.shape[:-2])
    keep = _outer_requires_grad(params)
    outs = []
    for t in range(T):
        sl = (Ellipsis, slice(t, t + 1), slice(None))
        state = _cut(_step(state, U[sl], V[sl], params, cfg, cfg.eta), keep)
        outs.append(_output(Q[sl], state, params, cfg))
    return ad.concat(outs, axis=-2)


def minibatch_bounds(T: int, b: int) -> list[tuple[int, int]]:
    return [(s, min(s + b, T)) for s in range(0, T, b)]


def scan_minibatch(X: Tensor, params: TTTParams, cfg: TTTConfig, b: Optional[int] = None,
                   return_states: bool = False):
    """Mini-batched scan: one averaged update per block of ``b`` tokens.

    Every output in block ``i`` is computed with the state after that block's
    update. A ragged final block of ``r < b`` tokens averages over ``r``.
    With ``return_states`` the post-update state of every block is returned too.
    """
    X = ad.as_tensor(X)
    b = cfg.b if b is None else b
    if b < 1:
        raise ValueError("mini-batch size must be >= 1")
    T = X.shape[-2]
    if T < 1:
        raise ValueError("scan needs at least one token")
    U, V, Q = project(X, params, cfg)
    state = initial_state(params, X.shape[:-2])
    keep = _outer_requires_grad(params)
    outs, states = [], []
    for s, e in minibatch_bounds(T, b):
        sl = (Ellipsis, slice(s, e), slice(None))
        state = _cut(_step(state, U[sl], V[sl], params, cfg, cfg.eta / (e - s)), keep)
        states.append(state)
        outs.append(_output(Q[sl], state, params, cfg))
    Z = ad.concat(outs, axis=-2)
    return (Z, states) if return_states else Z


def output_with_state(X: Tensor, state: Sequence[Tensor], params: TTTParams, cfg: TTTConfig) -> Tensor:
    """``theta_O f(theta_Q x; W)`` for the tokens of ``X`` under a fixed state."""
    _, _, Q = project(X, params, cfg)
    return _output(Q, state, params, cfg)


def bidirectional(X: Tensor, params, cfg: TTTConfig = None, scan: Optional[Callable] = None) -> Tensor:
    """Run the scan over the time-reversed sequence and reverse the result back."""
    scan = scan or (lambda Z: scan_minibatch(Z, params, cfg))
    return ad.time_reverse(scan(ad.time_reverse(X)))


def gated_residual(scan_output: Tensor, X: Tensor, gate: Tensor) -> Tensor:
    """``tanh(gate) * scan_output + X`` with the gate broadcast over time."""
    scan_output, X, gate = ad.as_tensor(scan_output), ad.as_tensor(X), ad.as_tensor(gate)
    if scan_output.shape != X.shape:
        raise ValueError(f"gated_residual: shape mismatch {scan_output.shape} vs {X.shape}")
    if gate.shape != X.shape[-1:]:
        raise ValueError(f"gated_residual: gate extent {gate.shape} vs features {X.shape[-1]}")
    return ad.add(ad.mul(ad.tanh(gate), scan_output), X)


def modified_block(X: Tensor, params, attn: Callable, cfg: Optional[TTTConfig] = None,
                   norm: Optional[tuple] = None, layer: Optional[Callable] = None) -> Tensor:
    """Attention followed by a forward and a reverse gated sequence layer.

    ``X' = attn(LN(X))``, ``Z = gate(layer, X'; alpha)``,
    ``Z' = gate(reverse(layer), Z; beta)``, ``Y = Z' + X``.
    ``params`` supplies ``alpha`` and ``beta``; ``layer`` defaults to the TTT
    mini-batch scan under ``params``/``cfg``.
    """
    X = ad.as_tensor(X)
    T, d = X.shape[-2:]
    mask = getattr(attn, "mask", None)
    if mask is not None and mask.T != T:
        raise ValueError(f"modified_block: segment map covers {mask.T} tokens, sequence has {T}")
    if layer is None:
        layer = lambda Z: scan_minibatch(Z, params, cfg)
    if norm is None:
        norm = (Tensor(np.ones(d)), Tensor(np.zeros(d)))
    Xp = attn(ad.layer_norm(X, norm[0], norm[1]))
    Z = gated_residual(layer(Xp), Xp, params.alpha)
    Zp = gated_residual(bidirectional(Z, params, scan=layer), Z, params.beta)
    return ad.add(Zp, X)
