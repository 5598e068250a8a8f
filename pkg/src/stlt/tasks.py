"""Desk-scale data: synthetic recall tasks and a byte-level text corpus.

Targets use ``-1`` for positions that carry no supervision.
"""

from __future__ import annotations

import hashlib
from pathlib import Path

import numpy as np

IGNORE = -1


def _rng(seed: int, *stream: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), *map(int, stream)])


def gen_copy_task(seed: int, N: int, vocab: int, delay: int, batch: int = 1, stream: int = 0):
    """Uniform random tokens; position ``n`` must emit the token seen at ``n - delay``."""
    if not 0 <= delay < N:
        raise ValueError(f"delay must satisfy 0 <= delay < N, got delay={delay}, N={N}")
    tokens = _rng(seed, stream).integers(0, vocab, size=(batch, N))
    targets = np.full_like(tokens, IGNORE)
    targets[:, delay:] = tokens[:, : N - delay]
    return tokens, targets


def gen_oscillatory_recall(seed: int, N: int, period: int, vocab: int = 16, batch: int = 1, stream: int = 0):
    """Periodic streams: a random motif of length ``period`` tiled with a random phase.

    The target at ``n`` is the token at lag ``period - 1`` (equivalently the
    next token of the periodic stream), so every earlier occurrence of the
    answer sits at a lag congruent to ``period - 1`` modulo ``period``.
    """
    if period < 2:
        raise ValueError("period must be >= 2")
    if period > N:
        raise ValueError(f"period {period} exceeds sequence length {N}; nothing to recall")
    rng = _rng(seed, stream)
    motifs = rng.integers(0, vocab, size=(batch, period))
    phase = rng.integers(0, period, size=(batch, 1))
    idx = (np.arange(N)[None, :] + phase) % period
    tokens = np.take_along_axis(motifs, idx, axis=1)
    lag = period - 1
    targets = np.full_like(tokens, IGNORE)
    targets[:, lag:] = tokens[:, : N - lag]
    return tokens, targets


class ByteCorpus:
    """Random fixed-length windows from a UTF-8 text file, vocabulary 256."""

    def __init__(self, path, N: int):
        self.data = np.frombuffer(Path(path).read_bytes(), dtype=np.uint8).astype(np.int64)
        if self.data.size < N + 2:
            raise ValueError(f"corpus {path} is shorter than one context window ({N + 1} bytes)")
        self.N = N

    def batch(self, seed: int, batch: int, stream: int = 0):
        starts = _rng(seed, stream).integers(0, self.data.size - self.N - 1, size=batch)
        win = np.stack([self.data[s : s + self.N + 1] for s in starts])
        return win[:, :-1], win[:, 1:]


def dataset_hash(tokens, targets) -> str:
    h = hashlib.sha256()
    for a in (tokens, targets):
        a = np.ascontiguousarray(np.asarray(a, dtype="<i8"))
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()
