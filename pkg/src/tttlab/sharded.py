"""Tensor-parallel TTT-MLP scan over CPU worker threads.

The MLP hidden state is split along its hidden axis: every worker owns a
column slice of ``W1`` and the matching row slice of ``W2``. Per mini-batch a
worker computes its slice of ``gelu(U W1)`` and a partial product with its
``W2`` rows; one all-reduce yields the full MLP output, from which the loss
gradient is formed once and handed back, and each worker then updates its own
slices locally. A second all-reduce assembles the layer output.

Reductions run in shard-index order, so results do not depend on thread
scheduling.
"""

from __future__ import annotations

import statistics
import threading
import time
from collections import Counter
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, gelu_deriv_np, gelu_np
from .ttt import TTTConfig, TTTParams, merge_heads, minibatch_bounds, project, scan_minibatch


@dataclass
class ShardedState:
    n_shards: int
    W1: list
    W2: list

    def reassemble(self) -> tuple[np.ndarray, np.ndarray]:
        return np.concatenate(self.W1, axis=-1), np.concatenate(self.W2, axis=-2)


def _bounds(hidden: int, n_shards: int) -> list[tuple[int, int]]:
    if n_shards < 1:
        raise ValueError("n_shards must be >= 1")
    if hidden % n_shards:
        raise ValueError(f"hidden width {hidden} is not divisible by n_shards={n_shards}")
    w = hidden // n_shards
    return [(i * w, (i + 1) * w) for i in range(n_shards)]


def shard_params(state: Sequence, n_shards: int) -> ShardedState:
    """Split ``(W1, W2)`` into column slices of W1 and row slices of W2."""
    if len(state) != 2:
        raise ValueError("sharding needs the two-layer MLP state (W1, W2)")
    W1, W2 = (w.data if isinstance(w, Tensor) else np.asarray(w) for w in state)
    hidden = W1.shape[-1]
    if W2.shape[-2] != hidden:
        raise ValueError(f"W1 hidden width {hidden} does not match W2 {W2.shape}")
    spans = _bounds(hidden, n_shards)
    return ShardedState(n_shards, [W1[..., :, a:b] for a, b in spans], [W2[..., a:b, :] for a, b in spans])


def all_reduce(partials: Sequence[np.ndarray]) -> np.ndarray:
    """Elementwise sum, accumulated in shard-index order."""
    partials = [np.asarray(p) for p in partials]
    if not partials:
        raise ValueError("all_reduce: no partials")
    shape = partials[0].shape
    for i, p in enumerate(partials):
        if p.shape != shape:
            raise ValueError(f"all_reduce: shard {i} has shape {p.shape}, shard 0 has {shape}")
    acc = partials[0].copy()
    for p in partials[1:]:
        acc = acc + p
    return acc


class ReduceGroup:
    """Rendezvous for ``n`` workers: deposit partials, get the reduced value back.

    ``post`` (supplied by shard 0) runs once on the reduced value; its result
    is what every worker receives. Calls are counted per tag.
    """

    def __init__(self, n: int):
        self.n = n
        self.counts: Counter = Counter()
        self._slots: list = [None] * n
        self._pending = None
        self._result = None
        self._arrive = threading.Barrier(n, action=self._reduce)
        self._leave = threading.Barrier(n)

    def _reduce(self):
        tag, post = self._pending
        total = all_reduce(self._slots)
        self._result = post(total) if post is not None else total
        self.counts[tag] += 1

    def __call__(self, shard: int, partial: np.ndarray, tag: str, post=None):
        self._slots[shard] = partial
        if shard == 0:
            self._pending = (tag, post)
        self._arrive.wait()
        result = self._result
        self._leave.wait()
        return result

    def abort(self):
        self._arrive.abort()
        self._leave.abort()


def sharded_scan(X, params: TTTParams, cfg: TTTConfig, n_shards: int, return_stats: bool = False):
    """Forward TTT-MLP mini-batch scan with the hidden state split over ``n_shards`` workers."""
    if cfg.variant != "mlp":
        raise ValueError("sharded_scan supports the MLP hidden state only")
    X = ad.as_tensor(X)
    T = X.shape[-2]
    spans = _bounds(cfg.hidden, n_shards)

    # projections are computed once and shared read-only by all workers
    U, V, Q = (t.data for t in project(X, params, cfg))
    lead = X.shape[:-2]
    W1, W2 = (np.broadcast_to(w.data, (*lead, *w.shape)) if lead else w.data for w in params.W0)
    h, kh = cfg.heads, cfg.head_dim
    gain = ad.reshape(params.ln_gain, (h, 1, kh))
    bias = ad.reshape(params.ln_bias, (h, 1, kh))
    bounds = minibatch_bounds(T, cfg.b)
    outs: list = [None] * len(bounds)
    group = ReduceGroup(n_shards)
    errors: list = []

    def core_grad(c, Ub, Vb):
        # loss gradient w.r.t. the reduced MLP output, formed once per mini-batch
        ct = Tensor(c, requires_grad=True)
        loss = ad.squared_error(ad.add(Tensor(Ub), ad.layer_norm(ct, gain, bias, cfg.ln_eps)), Tensor(Vb))
        return ad.grad(loss, [ct])[0].data

    def output(c, Qb):
        f = ad.add(Tensor(Qb), ad.layer_norm(Tensor(c), gain, bias, cfg.ln_eps))
        return ad.matmul(merge_heads(f), ad.transpose(params.theta_O)).data

    def worker(w: int):
        a0, a1 = spans[w]
        W1w, W2w = W1[..., :, a0:a1], W2[..., a0:a1, :]
        try:
            for i, (s, e) in enumerate(bounds):
                Ub, Vb, Qb = U[..., s:e, :], V[..., s:e, :], Q[..., s:e, :]
                hid = np.matmul(Ub, W1w)
                act = gelu_np(hid)
                g_core = group(w, np.matmul(act, W2w), "inner_loss",
                               post=lambda c, Ub=Ub, Vb=Vb: core_grad(c, Ub, Vb))
                g_act = np.matmul(g_core, np.swapaxes(W2w, -1, -2))
                gW2 = np.matmul(np.swapaxes(act, -1, -2), g_core)
                g_hid = g_act * gelu_deriv_np(hid, 1)
                gW1 = np.matmul(np.swapaxes(Ub, -1, -2), g_hid)
                lr = cfg.eta / (e - s)
                W1w = W1w - gW1 * lr
                W2w = W2w - gW2 * lr
                part = np.matmul(gelu_np(np.matmul(Qb, W1w)), W2w)
                z = group(w, part, "output", post=lambda c, Qb=Qb: output(c, Qb))
                if w == 0:
                    outs[i] = z
        except threading.BrokenBarrierError:
            pass
        except BaseException as exc:  # surfaced to the caller below
            errors.append(exc)
            group.abort()

    if n_shards == 1:
        worker(0)
    else:
        threads = [threading.Thread(target=worker, args=(w,), daemon=True) for w in range(n_shards)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
    if errors:
        raise errors[0]
    Z = Tensor(np.concatenate(outs, axis=-2))
    if return_stats:
        stats = {"minibatches": len(bounds), "inner_loss": group.counts["inner_loss"],
                 "output": group.counts["output"]}
        return Z, stats
    return Z


def _time(fn, repeats: int) -> list[float]:
    fn()  # warm-up
    out = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        out.append((time.perf_counter() - t0) * 1e3)
    return out


def shard_bench(cfg: TTTConfig, n_shards_list: Sequence[int], T_list: Sequence[int], repeats: int = 5,
                seed: int = 0, include_unsharded: bool = True) -> list[dict]:
    """Wall time per scan. One row per (T, n_shards): variant, T, n_shards, mean_ms, std_ms."""
    if not n_shards_list or not T_list:
        raise ValueError("shard_bench needs non-empty shard and length lists")
    repeats = max(repeats, 5)
    rng = np.random.default_rng(seed)
    from .ttt import init_ttt_params
    params = init_ttt_params(cfg, rng, requires_grad=False)
    rows = []
    with ad.finite_checks(False):
        for T in T_list:
            X = Tensor(rng.normal(size=(T, cfg.d)))
            if include_unsharded:
                ms = _time(lambda: scan_minibatch(X, params, cfg), repeats)
                rows.append(_row("ttt-mlp", T, 0, ms))
            for n in n_shards_list:
                ms = _time(lambda: sharded_scan(X, params, cfg, n), repeats)
                rows.append(_row("ttt-mlp-sharded", T, n, ms))
    return rows


def _row(variant, T, n, ms):
    return {"variant": variant, "T": T, "n_shards": n, "mean_ms": statistics.fmean(ms),
            "std_ms": statistics.stdev(ms) if len(ms) > 1 else 0.0}
