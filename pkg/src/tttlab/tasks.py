"""Synthetic sequence tasks: copying and cross-segment associative recall.

Targets use ``-1`` for positions that are not scored.

Recall layout (``n_segments`` equal segments of ``L = T / n_segments``
tokens): every pair is one composite token ``key * n_values + value`` placed
at a random position of the first segment; the queries sit at random
positions of the last segment and must be answered with the paired value.
Everything else is filler. A model whose attention stays inside a segment
sees no pair from a query position, so only the global layer can carry the
association.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

IGNORE = -1
N_FILLER = 4

# copy-task ids
BLANK, SEP, COPY_BASE = 0, 1, 2


@dataclass
class Batch:
    tokens: np.ndarray   # (n, T) int64
    targets: np.ndarray  # (n, T) int64, IGNORE where unscored

    def __len__(self) -> int:
        return len(self.tokens)


@dataclass(frozen=True)
class CopyTask:
    prefix: int
    n_symbols: int = 16
    kind: str = "copy"

    def __post_init__(self):
        if self.prefix < 1 or self.n_symbols < 2:
            raise ValueError("copy task needs prefix >= 1 and at least 2 symbols")

    @property
    def T(self) -> int:
        return 2 * self.prefix + 1

    @property
    def segment_len(self) -> int:
        return self.T

    @property
    def vocab_size(self) -> int:
        return COPY_BASE + self.n_symbols

    @property
    def chance(self) -> float:
        return 1.0 / self.n_symbols

    def sample(self, rng: np.random.Generator, n: int) -> Batch:
        p = self.prefix
        sym = rng.integers(0, self.n_symbols, size=(n, p)) + COPY_BASE
        tokens = np.concatenate([sym, np.full((n, 1), SEP), np.full((n, p), BLANK)], axis=1)
        targets = np.concatenate([np.full((n, p + 1), IGNORE), sym], axis=1)
        return Batch(tokens.astype(np.int64), targets.astype(np.int64))

    def describe(self) -> dict:
        return {**asdict(self), "T": self.T}


@dataclass(frozen=True)
class RecallTask:
    T: int
    n_pairs: int
    n_segments: int = 4
    n_keys: Optional[int] = None
    n_values: int = 8
    n_queries: Optional[int] = None
    kind: str = "recall"

    def __post_init__(self):
        if self.n_keys is None:
            object.__setattr__(self, "n_keys", max(2 * self.n_pairs, 8))
        if self.n_queries is None:
            object.__setattr__(self, "n_queries", self.n_pairs)
        if self.n_segments < 2:
            raise ValueError("recall needs at least 2 segments (pairs and queries in different segments)")
        if self.n_pairs < 1 or self.n_values < 2:
            raise ValueError("recall needs n_pairs >= 1 and n_values >= 2")
        if self.n_keys < self.n_pairs:
            raise ValueError(f"n_keys={self.n_keys} cannot hold {self.n_pairs} distinct pairs")
        if self.n_queries > self.n_pairs:
            raise ValueError("cannot query more keys than were stored")
        if self.T % self.n_segments:
            raise ValueError(f"T={self.T} is not divisible into {self.n_segments} segments")
        L = self.T // self.n_segments
        if self.n_pairs > L or self.n_queries > L:
            raise ValueError(f"layout overflow: segment length {L} cannot hold "
                             f"{self.n_pairs} pairs / {self.n_queries} queries")

    @property
    def segment_len(self) -> int:
        return self.T // self.n_segments

    @property
    def pair_base(self) -> int:
        return N_FILLER

    @property
    def query_base(self) -> int:
        return N_FILLER + self.n_keys * self.n_values

    @property
    def vocab_size(self) -> int:
        return self.query_base + self.n_keys

    @property
    def chance(self) -> float:
        return 1.0 / self.n_values

    def pair_token(self, key, value):
        return self.pair_base + np.asarray(key) * self.n_values + np.asarray(value)

    def value_token(self, value):
        """Targets reuse the ids of pairs with key 0, so every answer is an existing token."""
        return self.pair_token(0, value)

    def query_token(self, key):
        return self.query_base + np.asarray(key)

    def token_parts(self) -> np.ndarray:
        """``(vocab, 2)`` sub-symbol ids: a pair is (key, value), a query (key, query mark).

        Sub-symbols: fillers, then keys, then values, then the query mark, then "none".
        Models may embed a token as the sum of its sub-symbol embeddings.
        """
        F, K, V = N_FILLER, self.n_keys, self.n_values
        key0, val0, qmark, none = F, F + K, F + K + V, F + K + V + 1
        parts = np.empty((self.vocab_size, 2), dtype=np.int64)
        parts[:F] = np.stack([np.arange(F), np.full(F, none)], axis=1)
        k, v = np.divmod(np.arange(K * V), V)
        parts[F:self.query_base] = np.stack([key0 + k, val0 + v], axis=1)
        parts[self.query_base:] = np.stack([key0 + np.arange(K), np.full(K, qmark)], axis=1)
        return parts

    def sample(self, rng: np.random.Generator, n: int) -> Batch:
        T, L = self.T, self.segment_len
        tokens = rng.integers(0, N_FILLER, size=(n, T))
        targets = np.full((n, T), IGNORE)
        last = T - L
        for i in range(n):
            keys = rng.choice(self.n_keys, size=self.n_pairs, replace=False)
            values = rng.integers(0, self.n_values, size=self.n_pairs)
            ppos = np.sort(rng.choice(L, size=self.n_pairs, replace=False))
            tokens[i, ppos] = self.pair_token(keys, values)
            asked = rng.choice(self.n_pairs, size=self.n_queries, replace=False)
            qpos = last + np.sort(rng.choice(L, size=self.n_queries, replace=False))
            tokens[i, qpos] = self.query_token(keys[asked])
            targets[i, qpos] = self.value_token(values[asked])
        return Batch(tokens.astype(np.int64), targets.astype(np.int64))

    def solve(self, tokens: np.ndarray) -> np.ndarray:
        """Oracle predictions: look the queried key up among the stored pairs."""
        tokens = np.atleast_2d(tokens)
        pred = np.full(tokens.shape, IGNORE)
        for i, row in enumerate(tokens):
            is_pair = (row >= self.pair_base) & (row < self.query_base)
            table = {}
            for tok in row[is_pair]:
                key, value = divmod(int(tok) - self.pair_base, self.n_values)
                table[key] = value
            for t in np.nonzero(row >= self.query_base)[0]:
                key = int(row[t]) - self.query_base
                if key in table:
                    pred[i, t] = self.value_token(table[key])
        return pred

    def stats(self, batch: Batch) -> dict:
        """Pair count and query-to-pair distances, read back from the tokens."""
        counts, dists = [], []
        for row in batch.tokens:
            is_pair = (row >= self.pair_base) & (row < self.query_base)
            where = {}
            for t in np.nonzero(is_pair)[0]:
                where[(int(row[t]) - self.pair_base) // self.n_values] = t
            counts.append(int(is_pair.sum()))
            for t in np.nonzero(row >= self.query_base)[0]:
                dists.append(int(t - where[int(row[t]) - self.query_base]))
        dists = np.asarray(dists)
        return {"n_pairs": counts, "distances": dists, "min_distance": int(dists.min()),
                "max_distance": int(dists.max()), "mean_distance": float(dists.mean())}

    def describe(self) -> dict:
        return asdict(self)


@dataclass
class Dataset:
    task: object
    batch: Batch
    seed: int
    over_capacity: Optional[bool] = None

    @property
    def tokens(self) -> np.ndarray:
        return self.batch.tokens

    @property
    def targets(self) -> np.ndarray:
        return self.batch.targets


def gen_task(kind: str, T: int, d: Optional[int] = None, n_pairs: int = 1, segment_layout=4,
             seed: int = 0, n_examples: int = 256, **kw) -> Dataset:
    """Generate a deterministic dataset of ``n_examples`` sequences.

    ``segment_layout`` is the number of equal segments (recall only). For copy,
    ``T`` must be odd and the prefix is ``(T - 1) / 2``. ``d`` does not shape
    the data; for recall, ``over_capacity`` records whether ``n_pairs``
    exceeds ``matrix_capacity(d, d)``.
    """
    if kind == "copy":
        if T < 3 or T % 2 == 0:
            raise ValueError(f"copy needs odd T >= 3, got {T}")
        task = CopyTask((T - 1) // 2, **kw)
    elif kind == "recall":
        task = RecallTask(T, n_pairs, n_segments=int(segment_layout), **kw)
    else:
        raise ValueError(f"unknown task kind {kind!r}")
    ds = Dataset(task, task.sample(np.random.default_rng(seed), n_examples), seed)
    if d is not None and kind == "recall":
        ds.over_capacity = n_pairs > matrix_capacity(d, d)
    return ds


def matrix_capacity(k: int, d: int) -> float:
    """Pairs a ``k x k`` matrix state holds per model width: ``k^2 / d``."""
    return k * k / d
