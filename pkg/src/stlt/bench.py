"""Wall-clock and buffer-size scaling of the sequence mixers.

Timed mechanisms:

``stlt_streaming``
    bilateral coefficients by the two first-order scans.
``stlt_windowed``
    bilateral coefficients by direct summation under a fixed rectangular window.
``naive_attention``
    dense ``softmax(Q K^T / sqrt(d)) V`` as the quadratic reference.

The STLT rows time coefficient computation only.  Token mixing with a
softmax over relevance rows needs those rows; :func:`blockwise_mix` shows
that its auxiliary memory stays at ``block * N`` rather than ``N * N``.
"""

from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import astuple, dataclass
from enum import Enum
from statistics import median

import numpy as np
from threadpoolctl import threadpool_limits

from .core import Mode, WindowKind, WindowSpec, direct_forward, init_bank, streaming_forward

CSV_HEADER = ["mechanism", "N", "S", "d", "wall_time_ms", "peak_bytes"]
DEFAULT_BUDGET = 256 * 2**20
WINDOW_T = 16.0


class Mechanism(str, Enum):
    STLT_STREAMING = "stlt_streaming"
    STLT_WINDOWED = "stlt_windowed"
    NAIVE_ATTENTION = "naive_attention"


class MemoryBudgetError(ValueError):
    pass


@dataclass(frozen=True)
class BenchResult:
    mechanism: str
    N: int
    S: int
    d: int
    wall_time_ms: float
    peak_bytes: int


def buffer_bytes(mechanism: Mechanism | str, N: int, S: int, d: int) -> int:
    """Bytes held by the dominant buffer: complex coefficients or the dense score matrix."""
    mechanism = Mechanism(mechanism)
    if mechanism is Mechanism.NAIVE_ATTENTION:
        return N * N * 8
    return N * S * d * 16


def _streaming_job(N, S, d, rng):
    x = rng.normal(size=(N, d))
    s = init_bank(S, seed=0).s
    return lambda: streaming_forward(x, s, Mode.BILATERAL)


def _windowed_job(N, S, d, rng):
    x = rng.normal(size=(N, d))
    s = init_bank(S, seed=0).s
    spec = WindowSpec(WindowKind.RECTANGULAR)
    return lambda: direct_forward(x, s, WINDOW_T, spec, Mode.BILATERAL)


def naive_attention(Q, K, V):
    scores = Q @ K.T
    scores *= 1.0 / math.sqrt(Q.shape[-1])
    scores -= scores.max(axis=-1, keepdims=True)
    np.exp(scores, out=scores)
    scores /= scores.sum(axis=-1, keepdims=True)
    return scores @ V


def _attention_job(N, S, d, rng):
    Q, K, V = (rng.normal(size=(N, d)) for _ in range(3))
    return lambda: naive_attention(Q, K, V)


_JOBS = {
    Mechanism.STLT_STREAMING: _streaming_job,
    Mechanism.STLT_WINDOWED: _windowed_job,
    Mechanism.NAIVE_ATTENTION: _attention_job,
}


def time_call(fn, repeats: int = 5, warmup: int = 2) -> float:
    """Median wall time in milliseconds over ``repeats`` runs after ``warmup`` discarded runs."""
    if repeats < 5:
        raise ValueError("repeats must be >= 5")
    for _ in range(warmup):
        fn()
    samples = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        samples.append((time.perf_counter() - t0) * 1e3)
    return median(samples)


def bench_scaling(N_values, S: int = 16, d: int = 8, mechanism="stlt_streaming", repeats: int = 5,
                  warmup: int = 2, budget_bytes: int = DEFAULT_BUDGET, seed: int = 0) -> list[BenchResult]:
    """Time one mechanism over ascending ``N_values`` on a single thread.

    Refuses (``MemoryBudgetError``) before running anything if the largest
    configuration would exceed ``budget_bytes``.
    """
    mechanism = Mechanism(mechanism)
    N_values = [int(n) for n in N_values]
    if not N_values or any(b <= a for a, b in zip(N_values, N_values[1:])):
        raise ValueError("N values must be non-empty and strictly ascending")
    need = buffer_bytes(mechanism, N_values[-1], S, d)
    if need > budget_bytes:
        raise MemoryBudgetError(
            f"{mechanism.value} at N={N_values[-1]} needs ~{need / 2**20:.0f} MiB, budget is {budget_bytes / 2**20:.0f} MiB"
        )
    rng = np.random.default_rng(seed)
    out = []
    with threadpool_limits(limits=1):
        for N in N_values:
            fn = _JOBS[mechanism](N, S, d, rng)
            ms = time_call(fn, repeats, warmup)
            out.append(BenchResult(mechanism.value, N, S, d, ms, buffer_bytes(mechanism, N, S, d)))
    return out


def scaling_slope(results) -> float:
    """Least-squares slope of log time against log N."""
    N = np.log([r.N for r in results])
    t = np.log([r.wall_time_ms for r in results])
    return float(np.polyfit(N, t, 1)[0])


def results_csv(results, path=None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in results:
        w.writerow(astuple(r))
    text = buf.getvalue()
    if path is not None:
        with open(path, "w", newline="") as fh:
            fh.write(text)
    return text


def blockwise_mix(L, V, S: int, block: int = 128, causal: bool = False):
    """``softmax(Re<L_n, L_m> / sqrt(S)) V`` computed a block of query rows at a time.

    Returns ``(Z, peak_score_entries)``; the second value is the largest
    score buffer allocated, at most ``block * N``.
    """
    L = np.asarray(L)
    N = L.shape[0]
    flat = L.reshape(N, -1)
    Ar, Ai = flat.real, flat.imag
    Z = np.empty((N, V.shape[-1]))
    peak = 0
    for start in range(0, N, block):
        stop = min(start + block, N)
        R = Ar[start:stop] @ Ar.T + Ai[start:stop] @ Ai.T
        R *= 1.0 / math.sqrt(S)
        if causal:
            future = np.arange(N)[None, :] > np.arange(start, stop)[:, None]
            R[future] = -np.inf
        R -= R.max(axis=-1, keepdims=True)
        np.exp(R, out=R)
        R /= R.sum(axis=-1, keepdims=True)
        Z[start:stop] = R @ V
        peak = max(peak, R.size)
    return Z, peak

