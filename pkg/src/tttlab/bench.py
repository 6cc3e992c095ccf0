"""Wall-time scaling of forward passes for every sequence-layer variant."""

from __future__ import annotations

import gc
import time
from typing import Callable, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .baselines import (build_sliding_window_mask, full_mask, gated_delta_scan, init_attention_params,
                        init_recurrent_params, linear_attn_scan, segment_mask, softmax_attention)
from .ttt import TTTConfig, init_ttt_params, scan_minibatch

TIMING_COLUMNS = ("variant", "T", "n_shards", "median_ms", "iqr_ms", "slope")
BENCH_VARIANTS = ("ttt-mlp", "ttt-linear", "mamba-like", "delta", "local-attn", "swa", "full-attn")


def make_forward(variant: str, T: int, d: int = 64, k: Optional[int] = None, b: int = 64,
                 eta: Optional[float] = None, segment_len: int = 128, window: int = 128,
                 seed: int = 0) -> Callable[[Tensor], Tensor]:
    """A forward pass of one layer of ``variant`` on ``(T, d)`` inputs, with frozen parameters."""
    rng = np.random.default_rng(seed)
    if variant in ("ttt-mlp", "ttt-linear"):
        cfg = TTTConfig(d, k, "mlp" if variant == "ttt-mlp" else "linear", b=b, eta=eta)
        params = init_ttt_params(cfg, rng, requires_grad=False)
        return lambda X: scan_minibatch(X, params, cfg)
    if variant in ("mamba-like", "delta"):
        params = init_recurrent_params(d, k, rng, requires_grad=False)
        scan = linear_attn_scan if variant == "mamba-like" else gated_delta_scan
        return lambda X: scan(X, params)
    masks = {"local-attn": lambda: segment_mask(T, segment_len),
             "swa": lambda: build_sliding_window_mask(T, window),
             "full-attn": lambda: full_mask(T)}
    if variant not in masks:
        raise ValueError(f"unknown variant {variant!r}")
    params = init_attention_params(d, k, rng=rng, requires_grad=False)
    mask = masks[variant]()
    return lambda X: softmax_attention(X, params, mask)


def time_call(fn: Callable[[], object], repeats: int = 5) -> np.ndarray:
    """Milliseconds for ``repeats`` calls after one untimed warm-up call.

    As in ``timeit``, the cyclic garbage collector is paused while timing: a graph
    build allocates many small objects and a collection landing inside one call
    would add noise unrelated to sequence length.
    """
    fn()
    out = np.empty(repeats)
    was_enabled = gc.isenabled()
    gc.collect()
    gc.disable()
    try:
        for i in range(repeats):
            t0 = time.perf_counter()
            fn()
            out[i] = (time.perf_counter() - t0) * 1e3
    finally:
        if was_enabled:
            gc.enable()
    return out


def loglog_slope(T_list: Sequence[int], times: Sequence[float]) -> float:
    return float(np.polyfit(np.log(np.asarray(T_list, float)), np.log(np.asarray(times, float)), 1)[0])


def throughput_bench(variants: Sequence[str], T_list: Sequence[int], repeats: int = 5, d: int = 64,
                     seed: int = 0, **layer_kw) -> list[dict]:
    """Median and IQR forward time per (variant, T), plus each variant's log-log slope.

    Rows follow ``TIMING_COLUMNS``; the slope is repeated on every row of a variant.
    """
    T_list = sorted(T_list)
    if len(T_list) < 3 or T_list[-1] < 8 * T_list[0]:
        raise ValueError("T_list needs at least 3 lengths spanning an 8x range")
    repeats = max(repeats, 5)
    rng = np.random.default_rng(seed)
    rows = []
    with ad.finite_checks(False):
        for v in variants:
            vrows = []
            for T in T_list:
                fwd = make_forward(v, T, d=d, seed=seed, **layer_kw)
                X = Tensor(rng.normal(size=(T, d)))
                ms = time_call(lambda: fwd(X), repeats)
                q1, med, q3 = np.percentile(ms, [25, 50, 75])
                vrows.append({"variant": v, "T": T, "n_shards": 0, "median_ms": float(med),
                              "iqr_ms": float(q3 - q1)})
            slope = loglog_slope(T_list, [r["median_ms"] for r in vrows])
            for r in vrows:
                r["slope"] = slope
            rows += vrows
    return rows


def slopes(rows: Sequence[dict]) -> dict:
    return {r["variant"]: r["slope"] for r in rows}
