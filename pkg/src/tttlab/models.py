"""A one-block language model used for the synthetic tasks.

    tokens -> embedding + position -> sequence block -> MLP block -> LN -> logits

The sequence block is plain attention (``local-attn``, ``swa``, ``full-attn``)
or the gated block of attention plus a bidirectional global layer (TTT or a
matrix-state RNN). Parameters are named ``<role>.<name>`` so the training
code can group and freeze them by role.
"""

from __future__ import annotations

from types import SimpleNamespace
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .baselines import (AttentionParams, RecurrentParams, build_sliding_window_mask, full_mask,
                        gated_delta_scan, init_attention_params, init_recurrent_params,
                        linear_attn_scan, segment_mask, softmax_attention)
from .ttt import TTTConfig, TTTParams, init_ttt_params, modified_block, scan_minibatch

VARIANTS = ("ttt-mlp", "ttt-linear", "mamba-like", "delta", "local-attn", "swa", "full-attn")
GLOBAL_LAYERS = ("ttt-mlp", "ttt-linear", "mamba-like", "delta")


class ToyModel:
    def __init__(self, variant: str, vocab: int, T: int, segment_len: Optional[int] = None, seed: int = 0,
                 d: int = 16, k: Optional[int] = None, heads: int = 1, b: int = 16, eta: Optional[float] = None,
                 window: Optional[int] = None, hidden_mult: int = 4, decay_bias: float = 5.0,
                 token_parts: Optional[np.ndarray] = None, state_std: float = 0.02,
                 gate_init: Optional[float] = None):
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}; choose from {', '.join(VARIANTS)}")
        self.variant, self.vocab, self.T, self.d = variant, vocab, T, d
        self.k = k or d
        self.segment_len = segment_len or T
        rng = np.random.default_rng(seed)
        # a token is embedded as the sum of its sub-symbols' embeddings
        self.parts = np.arange(vocab)[:, None] if token_parts is None else np.asarray(token_parts)
        if self.parts.shape[0] != vocab:
            raise ValueError(f"token_parts covers {self.parts.shape[0]} tokens, vocabulary has {vocab}")
        p = {
            "embed.tok": rng.normal(0, 1.0, (int(self.parts.max()) + 1, d)),
            "embed.pos": rng.normal(0, 0.1, (T, d)),
            "norm.block_gain": np.ones(d), "norm.block_bias": np.zeros(d),
        }
        ap = init_attention_params(d, self.k, heads, rng, requires_grad=False)
        p.update({"attn." + n: t.data for n, t in ap.named().items()})
        self.heads = heads
        self.cfg = None
        if variant.startswith("ttt"):
            self.cfg = TTTConfig(d, self.k, "mlp" if variant == "ttt-mlp" else "linear",
                                 hidden_mult=hidden_mult, b=b, eta=eta, heads=heads)
            tp = init_ttt_params(self.cfg, rng, requires_grad=False, state_std=state_std)
            for n, t in tp.named().items():
                role = "gates" if n in ("alpha", "beta") else "ttt"
                p[f"{role}.{n}"] = t.data
            self._ttt_template = tp
        elif variant in ("mamba-like", "delta"):
            rp = init_recurrent_params(d, self.k, rng, requires_grad=False, decay_bias=decay_bias)
            for n, t in rp.named().items():
                if variant == "mamba-like" and n in ("w_beta", "b_beta"):
                    continue  # the delta-rule write strength is unused without the delta rule
                role = "gates" if n in ("alpha", "beta") else "rnn"
                p[f"{role}.{n}"] = t.data
        if gate_init is not None:
            for n in ("gates.alpha", "gates.beta"):
                if n in p:
                    p[n] = np.full(d, float(gate_init))
        f = hidden_mult * d
        p.update({
            "mlp.norm_gain": np.ones(d), "mlp.norm_bias": np.zeros(d),
            "mlp.W_in": rng.normal(0, 1 / np.sqrt(d), (d, f)), "mlp.b_in": np.zeros(f),
            "mlp.W_out": rng.normal(0, 1 / np.sqrt(f), (f, d)), "mlp.b_out": np.zeros(d),
            "norm.final_gain": np.ones(d), "norm.final_bias": np.zeros(d),
            "head.W": rng.normal(0, 1 / np.sqrt(d), (d, vocab)), "head.bias": np.zeros(vocab),
        })
        self.params = p
        if variant == "full-attn":
            self.mask = full_mask(T)
        elif variant == "swa":
            self.mask = build_sliding_window_mask(T, window or self.segment_len)
        else:
            self.mask = segment_mask(T, self.segment_len)

    def n_params(self, role: Optional[str] = None) -> int:
        return sum(v.size for n, v in self.params.items() if role is None or n.startswith(role + "."))

    def _sub(self, P: dict, role: str) -> dict:
        cut = len(role) + 1
        return {n[cut:]: t for n, t in P.items() if n.startswith(role + ".")}

    def _global_layer(self, P: dict):
        gates = self._sub(P, "gates")
        if self.variant.startswith("ttt"):
            tp = self._ttt_template.with_tensors({**self._sub(P, "ttt"), **gates})
            return tp, (lambda Z: scan_minibatch(Z, tp, self.cfg))
        sub = self._sub(P, "rnn")
        sub.setdefault("w_beta", Tensor(np.zeros((self.d, 1))))
        sub.setdefault("b_beta", Tensor(np.zeros(1)))
        rp = RecurrentParams(**sub, alpha=gates["alpha"], beta=gates["beta"])
        scan = linear_attn_scan if self.variant == "mamba-like" else gated_delta_scan
        return rp, (lambda Z: scan(Z, rp))

    def logits(self, P: dict, tokens: np.ndarray) -> Tensor:
        P = {n: v if isinstance(v, Tensor) else Tensor(v) for n, v in P.items()}
        T = tokens.shape[-1]
        parts = self.parts[tokens]
        X = P["embed.pos"][:T]
        for j in range(parts.shape[-1]):
            X = ad.add(P["embed.tok"][parts[..., j]], X)
        ap = AttentionParams(*(P["attn." + n] for n in ("Wq", "Wk", "Wv", "Wo")), heads=self.heads)
        attn = lambda Z: softmax_attention(Z, ap, self.mask)
        attn.mask = self.mask
        norm = (P["norm.block_gain"], P["norm.block_bias"])
        if self.variant in GLOBAL_LAYERS:
            gp, layer = self._global_layer(P)
            X = modified_block(X, SimpleNamespace(alpha=gp.alpha, beta=gp.beta), attn, norm=norm, layer=layer)
        else:
            X = ad.add(attn(ad.layer_norm(X, *norm)), X)
        h = ad.layer_norm(X, P["mlp.norm_gain"], P["mlp.norm_bias"])
        h = ad.add(ad.matmul(h, P["mlp.W_in"]), P["mlp.b_in"])
        h = ad.add(ad.matmul(ad.gelu(h), P["mlp.W_out"]), P["mlp.b_out"])
        X = ad.add(X, h)
        X = ad.layer_norm(X, P["norm.final_gain"], P["norm.final_bias"])
        return ad.add(ad.matmul(X, P["head.W"]), P["head.bias"])

    def loss(self, P: dict, batch) -> Tensor:
        """Mean cross-entropy over the scored positions."""
        logp = ad.log_softmax(self.logits(P, batch.tokens))
        rows, cols = np.nonzero(batch.targets >= 0)
        picked = logp[rows, cols, batch.targets[rows, cols]]
        return ad.neg(ad.mean(picked))

    def predict(self, P: dict, tokens: np.ndarray) -> np.ndarray:
        with ad.finite_checks(False):
            return np.argmax(self.logits(P, tokens).data, axis=-1)

    def accuracy(self, P: dict, batch, chunk: int = 32) -> float:
        hits = total = 0
        for i in range(0, len(batch.tokens), chunk):
            tok, tgt = batch.tokens[i:i + chunk], batch.targets[i:i + chunk]
            pred = self.predict(P, tok)
            scored = tgt >= 0
            hits += int(np.sum(pred[scored] == tgt[scored]))
            total += int(scored.sum())
        return hits / max(total, 1)
