"""Laplace node banks, analysis windows and the discrete STLT.

Coefficients are complex arrays of shape ``(..., N, S, d)``: position,
node, feature channel.  The input sequence has shape ``(..., N, d)``; any
leading axes are treated as batch axes.

Both evaluation routes use the relative-offset kernel

    c_k(delta) = w(delta * dt; T) * exp(-s_k * |delta| * dt),   delta = m - n

so a node's influence decays (and rotates) with distance from the query
position in either direction.  ``stlt_direct`` sums the kernel explicitly
over the window support; ``stlt_streaming`` evaluates the exponential-only
case with one causal and one anticausal first-order scan.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from enum import Enum

import numpy as np

EPS_SIGMA = 1e-4
T_MIN = 1.0


class Mode(str, Enum):
    BILATERAL = "bilateral"
    UNILATERAL = "unilateral"


class WindowKind(str, Enum):
    HANN = "hann"
    RECTANGULAR = "rectangular"
    EXPONENTIAL_ONLY = "exponential_only"


class StltOverflowError(ArithmeticError):
    pass


def softplus(x):
    x = np.asarray(x, dtype=float)
    return np.logaddexp(0.0, x)


def inv_softplus(y):
    y = np.asarray(y, dtype=float)
    # log(expm1(y)) loses precision for large y; y + log(1 - exp(-y)) does not
    return y + np.log(-np.expm1(-y))


def sigmoid(x):
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@dataclass
class LaplaceNodeBank:
    """Learnable Laplace nodes ``s_k = sigma_k + j omega_k`` and window width.

    ``sigma_raw`` and ``T_raw`` are unconstrained; the effective values pass
    through a softplus plus a floor so that decay rates stay positive.
    """

    sigma_raw: np.ndarray
    omega: np.ndarray
    T_raw: float
    delta: float = 1.0
    eps_sigma: float = EPS_SIGMA
    T_min: float = T_MIN

    def __post_init__(self):
        self.sigma_raw = np.atleast_1d(np.asarray(self.sigma_raw, dtype=float))
        self.omega = np.atleast_1d(np.asarray(self.omega, dtype=float))
        self.T_raw = float(self.T_raw)
        if self.sigma_raw.shape != self.omega.shape or self.sigma_raw.ndim != 1:
            raise ValueError("sigma_raw and omega must be 1-d arrays of equal length")
        if self.S_max < 1:
            raise ValueError("a node bank needs at least one node")
        if not self.delta > 0:
            raise ValueError("delta must be positive")

    @property
    def S_max(self) -> int:
        return self.sigma_raw.shape[0]

    @property
    def sigma(self) -> np.ndarray:
        return softplus(self.sigma_raw) + self.eps_sigma

    @property
    def T(self) -> float:
        return float(softplus(self.T_raw)) + self.T_min * self.delta

    @property
    def s(self) -> np.ndarray:
        return self.sigma + 1j * self.omega

    def copy(self) -> LaplaceNodeBank:
        return replace(self, sigma_raw=self.sigma_raw.copy(), omega=self.omega.copy())


def effective_params(bank: LaplaceNodeBank) -> tuple[np.ndarray, np.ndarray, float]:
    """Return ``(sigma, omega, T)`` with the stability floors applied."""
    return bank.sigma, bank.omega.copy(), bank.T


def init_bank(
    S_max: int,
    sigma_range: tuple[float, float] = (1e-3, 1e1),
    omega_max: float = math.pi,
    T_init: float = 32.0,
    delta: float = 1.0,
    seed: int = 0,
    eps_sigma: float = EPS_SIGMA,
    T_min: float = T_MIN,
) -> LaplaceNodeBank:
    """Log-spaced decays, uniformly drawn frequencies, window width ``T_init``.

    ``T_init`` is in the same time units as ``delta`` (so ``32 * delta`` is a
    32-step window).
    """
    sigma_min, sigma_max = map(float, sigma_range)
    if not 0 < sigma_min < sigma_max:
        raise ValueError(f"invalid sigma range [{sigma_min}, {sigma_max}]")
    if sigma_min <= eps_sigma:
        raise ValueError(f"sigma_min must exceed the stability floor {eps_sigma}")
    if omega_max < 0:
        raise ValueError("omega_max must be non-negative")
    if not T_init > T_min * delta:
        raise ValueError(f"T_init must exceed T_min * delta = {T_min * delta}")
    if S_max < 1:
        raise ValueError("S_max must be >= 1")

    sigma = np.exp(np.linspace(np.log(sigma_min), np.log(sigma_max), S_max))
    rng = np.random.default_rng(seed)
    omega = rng.uniform(0.0, omega_max, size=S_max)
    return LaplaceNodeBank(
        sigma_raw=inv_softplus(sigma - eps_sigma),
        omega=omega,
        T_raw=float(inv_softplus(T_init - T_min * delta)),
        delta=delta,
        eps_sigma=eps_sigma,
        T_min=T_min,
    )


def half_lives(bank: LaplaceNodeBank) -> np.ndarray:
    return math.log(2.0) / bank.sigma


@dataclass(frozen=True)
class WindowSpec:
    kind: WindowKind = WindowKind.EXPONENTIAL_ONLY
    c_w: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "kind", WindowKind(self.kind))

    def support_radius(self, T: float, delta: float = 1.0, N: int | None = None) -> int:
        """Half-width of the summation range in steps.

        The exponential-only window has unbounded support, so the radius is
        the full sequence (``N - 1``) when ``N`` is known.
        """
        if self.kind is WindowKind.EXPONENTIAL_ONLY:
            if N is None:
                raise ValueError("exponential_only window needs the sequence length")
            return max(N - 1, 0)
        W = math.ceil(self.c_w * T / delta - 1e-12)
        return max(W, 1) if N is None else min(max(W, 1), max(N - 1, 0))


def window_eval(spec: WindowSpec, t, T: float, delta: float = 1.0):
    """Evaluate ``w(t; T)``.

    The Hann taper has half-width ``c_w * T`` (continuous in ``T``, so the
    window width receives a gradient); the rectangular window is 1 on the
    integer support ``|t| <= W * delta``.
    """
    t = np.asarray(t, dtype=float)
    if spec.kind is WindowKind.EXPONENTIAL_ONLY:
        return np.ones_like(t)
    if spec.kind is WindowKind.RECTANGULAR:
        W = spec.support_radius(T, delta)
        return (np.abs(t) <= W * delta + 1e-12).astype(float)
    half = spec.c_w * T
    inside = np.abs(t) < half
    return np.where(inside, 0.5 * (1.0 + np.cos(np.pi * t / half)), 0.0)


def window_dT(spec: WindowSpec, t, T: float):
    """Derivative of the window with respect to ``T`` (zero for flat kinds)."""
    t = np.asarray(t, dtype=float)
    if spec.kind is not WindowKind.HANN:
        return np.zeros_like(t)
    half = spec.c_w * T
    inside = np.abs(t) < half
    return np.where(inside, 0.5 * np.pi * t * np.sin(np.pi * t / half) / (half * T), 0.0)


def _offsets(mode: Mode, W: int) -> range:
    return range(-W, W + 1) if Mode(mode) is Mode.BILATERAL else range(-W, 1)


def _check_finite(L: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(L)):
        raise StltOverflowError("non-finite STLT coefficient")
    return L


# ---------------------------------------------------------------------------
# direct (windowed) evaluation


def direct_forward(x, s, T, spec: WindowSpec, mode, delta=1.0):
    """Windowed sum over offsets; works on effective parameters."""
    x = np.asarray(x, dtype=float)
    N = x.shape[-2]
    W = spec.support_radius(T, delta, N)
    out = np.zeros(x.shape[:-2] + (N, s.shape[0], x.shape[-1]), dtype=complex)
    for off in _offsets(mode, W):
        if abs(off) >= N:
            continue
        w = float(window_eval(spec, off * delta, T, delta))
        if w == 0.0:
            continue
        c = w * np.exp(-s * abs(off) * delta)  # (S,)
        lo, hi = max(0, -off), min(N, N - off)
        out[..., lo:hi, :, :] += c[:, None] * x[..., lo + off : hi + off, None, :]
    return out


def direct_backward(g, x, s, T, spec: WindowSpec, mode, delta=1.0):
    """Vector-Jacobian product of :func:`direct_forward`.

    ``g`` holds dloss/dRe L + j dloss/dIm L.  Returns gradients for ``x``,
    ``s`` (complex, real part -> sigma, imaginary part -> omega) and ``T``.
    """
    x = np.asarray(x, dtype=float)
    N = x.shape[-2]
    W = spec.support_radius(T, delta, N)
    gx = np.zeros_like(x)
    gs = np.zeros(s.shape, dtype=complex)
    gT = 0.0
    for off in _offsets(mode, W):
        if abs(off) >= N:
            continue
        t = off * delta
        w = float(window_eval(spec, t, T, delta))
        dw = float(window_dT(spec, t, T))
        if w == 0.0 and dw == 0.0:
            continue
        E = np.exp(-s * abs(off) * delta)
        lo, hi = max(0, -off), min(N, N - off)
        gseg = g[..., lo:hi, :, :]
        xseg = x[..., lo + off : hi + off, :]
        gx[..., lo + off : hi + off, :] += np.einsum("...nki,k->...ni", gseg, np.conj(w * E)).real
        gc = np.einsum("...nki,...ni->...k", gseg, xseg).reshape(-1, s.shape[0]).sum(axis=0)
        gs += np.conj(-abs(off) * delta * E) * (w * gc)
        gT += dw * float(np.sum((np.conj(gc) * E).real))
    return gx, gs, gT


def stlt_direct(
    x,
    bank: LaplaceNodeBank,
    spec: WindowSpec | None = None,
    mode: Mode | str = Mode.BILATERAL,
) -> np.ndarray:
    """Reference STLT by explicit summation, cost O(N * S * W * d)."""
    spec = spec or WindowSpec()
    return _check_finite(direct_forward(x, bank.s, bank.T, spec, Mode(mode), bank.delta))


# ---------------------------------------------------------------------------
# streaming evaluation


def causal_scan(x, r):
    """F_n = x_n + r * F_{n-1} for every node; state is O(S * d)."""
    x = np.asarray(x, dtype=float)
    N = x.shape[-2]
    out = np.empty(x.shape[:-2] + (N, r.shape[0], x.shape[-1]), dtype=complex)
    rr = r[:, None]
    state = np.zeros(x.shape[:-2] + (r.shape[0], x.shape[-1]), dtype=complex)
    for n in range(N):
        state = x[..., n, None, :] + rr * state
        out[..., n, :, :] = state
    return out


def anticausal_scan(x, r):
    """G_n = r * (x_{n+1} + G_{n+1}) with G_{N-1} = 0."""
    x = np.asarray(x, dtype=float)
    N = x.shape[-2]
    out = np.empty(x.shape[:-2] + (N, r.shape[0], x.shape[-1]), dtype=complex)
    rr = r[:, None]
    state = np.zeros(x.shape[:-2] + (r.shape[0], x.shape[-1]), dtype=complex)
    out[..., N - 1, :, :] = state
    for n in range(N - 2, -1, -1):
        state = rr * (x[..., n + 1, None, :] + state)
        out[..., n, :, :] = state
    return out


def streaming_forward(x, s, mode, delta=1.0):
    """Returns ``(L, F, G)``; ``G`` is None in unilateral mode."""
    r = np.exp(-s * delta)
    F = causal_scan(x, r)
    if Mode(mode) is Mode.UNILATERAL:
        return F, F, None
    G = anticausal_scan(x, r)
    return F + G, F, G


def streaming_backward(g, x, s, F, G, delta=1.0):
    """Adjoint scans for :func:`streaming_forward`.

    The causal scan's adjoint runs right-to-left and the anticausal scan's
    adjoint runs left-to-right.  Returns ``(gx, gs)``.
    """
    x = np.asarray(x, dtype=float)
    N = x.shape[-2]
    r = np.exp(-s * delta)
    rc = np.conj(r)[:, None]
    gx = np.zeros_like(x)
    gr = np.zeros(r.shape, dtype=complex)
    red = tuple(range(g.ndim - 3)) + (g.ndim - 2,)  # batch axes and channels of a slice

    a = np.zeros(g.shape[:-3] + g.shape[-2:], dtype=complex)
    for n in range(N - 1, -1, -1):
        a = g[..., n, :, :] + rc * a
        gx[..., n, :] += a.real.sum(axis=-2)
        if n > 0:
            gr += np.sum(np.conj(F[..., n - 1, :, :]) * a, axis=red)

    if G is not None:
        c = np.zeros_like(a)
        for n in range(N - 1):
            c = g[..., n, :, :] + rc * c
            gH = rc * c
            gx[..., n + 1, :] += gH.real.sum(axis=-2)
            H = x[..., n + 1, None, :] + G[..., n + 1, :, :]
            gr += np.sum(np.conj(H) * c, axis=red)

    gs = np.conj(-delta * r) * gr
    return gx, gs


def stlt_streaming(x, bank: LaplaceNodeBank, mode: Mode | str = Mode.BILATERAL) -> np.ndarray:
    """Exponential-only STLT in one (unilateral) or two (bilateral) linear scans."""
    L, _, _ = streaming_forward(x, bank.s, Mode(mode), bank.delta)
    return _check_finite(L)


def coefficient_buffer_entries(N: int, S: int, d: int) -> int:
    return N * S * d


__all__ = [
    "EPS_SIGMA",
    "T_MIN",
    "LaplaceNodeBank",
    "Mode",
    "StltOverflowError",
    "WindowKind",
    "WindowSpec",
    "effective_params",
    "half_lives",
    "init_bank",
    "stlt_direct",
    "stlt_streaming",
    "window_eval",
]
