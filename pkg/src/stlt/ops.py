"""Differentiable building blocks recorded on a :class:`~stlt.grad.Tape`.

Every function takes the tape first and returns a new :class:`Var`.  The
backward rules are hand-written; ``tests/test_grad.py`` checks each of them
against central differences.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import erf

from . import core
from .core import Mode, WindowSpec
from .grad import Tape, Var

LN_EPS = 1e-5


def _sum_to(g, shape):
    """Undo numpy broadcasting by summing ``g`` down to ``shape``."""
    g = np.asarray(g)
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise / dense


def add(tape: Tape, a: Var, b: Var) -> Var:
    sa, sb = np.shape(a.value), np.shape(b.value)
    return tape.record(a.value + b.value, (a, b), lambda g: (_sum_to(g, sa), _sum_to(g, sb)))


def add_const(tape: Tape, a: Var, c) -> Var:
    return tape.record(a.value + c, (a,), lambda g: (g,))


def scale(tape: Tape, a: Var, c: float) -> Var:
    return tape.record(a.value * c, (a,), lambda g: (g * c,))


def total(tape: Tape, *terms: Var) -> Var:
    value = sum(float(t.value) for t in terms)
    return tape.record(np.float64(value), terms, lambda g: tuple(g for _ in terms))


def mean(tape: Tape, a: Var, axis) -> Var:
    shape = np.shape(a.value)
    n = shape[axis]

    def vjp(g):
        return (np.broadcast_to(np.expand_dims(g, axis), shape) / n,)

    return tape.record(a.value.mean(axis=axis), (a,), vjp)


def take(tape: Tape, a: Var, index, axis) -> Var:
    """Select one slice along ``axis`` (used for first-position pooling)."""
    shape = np.shape(a.value)

    def vjp(g):
        out = np.zeros(shape)
        sl = [slice(None)] * len(shape)
        sl[axis] = index
        out[tuple(sl)] = g
        return (out,)

    return tape.record(np.take(a.value, index, axis=axis), (a,), vjp)


def matmul(tape: Tape, x: Var, W: Var) -> Var:
    """``x @ W`` with ``x`` of shape (..., n) and ``W`` of shape (n, m)."""
    xv, Wv = x.value, W.value

    def vjp(g):
        gx = g @ Wv.T
        gW = xv.reshape(-1, xv.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return gx, gW

    return tape.record(xv @ Wv, (x, W), vjp)


def affine_t(tape: Tape, x: Var, W: Var, b: Var) -> Var:
    """``x @ W.T + b`` with ``W`` stored as (out, in)."""
    xv, Wv = x.value, W.value

    def vjp(g):
        gx = g @ Wv
        gW = g.reshape(-1, g.shape[-1]).T @ xv.reshape(-1, xv.shape[-1])
        return gx, gW, _sum_to(g, Wv.shape[:1])

    return tape.record(xv @ Wv.T + b.value, (x, W, b), vjp)


def embedding(tape: Tape, table: Var, tokens) -> Var:
    tokens = np.asarray(tokens)
    V = table.value.shape[0]

    def vjp(g):
        gt = np.zeros_like(table.value)
        np.add.at(gt, tokens.reshape(-1), g.reshape(-1, g.shape[-1]))
        return (gt,)

    if tokens.size and (tokens.min() < 0 or tokens.max() >= V):
        raise ValueError(f"token id out of range for vocabulary of size {V}")
    return tape.record(table.value[tokens], (table,), vjp)


def gelu(tape: Tape, x: Var) -> Var:
    xv = x.value
    cdf = 0.5 * (1.0 + erf(xv / math.sqrt(2.0)))
    pdf = np.exp(-0.5 * xv * xv) / math.sqrt(2.0 * math.pi)
    return tape.record(xv * cdf, (x,), lambda g: (g * (cdf + xv * pdf),))


def sigmoid(tape: Tape, x: Var) -> Var:
    y = core.sigmoid(x.value)
    return tape.record(y, (x,), lambda g: (g * y * (1.0 - y),))


def softplus_floor(tape: Tape, raw: Var, floor: float) -> Var:
    """``softplus(raw) + floor``; the parameter-stability transform."""
    rv = raw.value
    sig = core.sigmoid(rv)
    return tape.record(core.softplus(rv) + floor, (raw,), lambda g: (g * sig,))


def layer_norm(tape: Tape, x: Var, gain: Var, bias: Var, eps: float = LN_EPS) -> Var:
    xv = x.value
    mu = xv.mean(axis=-1, keepdims=True)
    xc = xv - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gv = gain.value

    def vjp(g):
        gg = _sum_to(g * xhat, gv.shape)
        gb = _sum_to(g, gv.shape)
        gxhat = g * gv
        gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True) - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        return gx, gg, gb

    return tape.record(xhat * gv + bias.value, (x, gain, bias), vjp)


# ---------------------------------------------------------------------------
# STLT, relevance and mixing


def stlt(
    tape: Tape,
    x: Var,
    sigma: Var,
    omega: Var,
    T: Var,
    mode: Mode,
    spec: WindowSpec,
    route: str = "streaming",
    delta: float = 1.0,
) -> Var:
    """STLT coefficients from effective (floored) node parameters."""
    xv = x.value
    s = sigma.value + 1j * omega.value
    Tv = float(T.value)
    if route == "streaming":
        if spec.kind is not core.WindowKind.EXPONENTIAL_ONLY:
            raise ValueError("the streaming route requires the exponential_only window")
        L, F, G = core.streaming_forward(xv, s, mode, delta)

        def vjp(g):
            gx, gs = core.streaming_backward(g, xv, s, F, G, delta)
            return gx, gs.real, gs.imag, None

    elif route == "direct":
        L = core.direct_forward(xv, s, Tv, spec, mode, delta)

        def vjp(g):
            gx, gs, gT = core.direct_backward(g, xv, s, Tv, spec, mode, delta)
            return gx, gs.real, gs.imag, np.asarray(gT)

    else:
        raise ValueError(f"unknown STLT route {route!r}")
    core._check_finite(L)
    return tape.record(L, (x, sigma, omega, T), vjp)


def scale_nodes(tape: Tape, L: Var, m: Var) -> Var:
    """``L[..., n, k, i] * m[..., k]``: per-node mask factors."""
    Lv, mv = L.value, m.value
    mb = mv[..., None, :, None]

    def vjp(g):
        gm = np.sum((np.conj(g) * Lv).real, axis=(-3, -1))
        return g * mb, _sum_to(gm, mv.shape)

    return tape.record(Lv * mb, (L, m), vjp)


def relevance(tape: Tape, La: Var, Lb: Var) -> Var:
    """``R[n, m] = Re sum_{k,i} La[n,k,i] conj(Lb[m,k,i])``."""
    A, B = La.value, Lb.value
    if A.shape[-2:] != B.shape[-2:]:
        raise ValueError(f"coefficient shapes {A.shape} and {B.shape} disagree in (S, d)")
    Af = A.reshape(A.shape[:-2] + (-1,))
    Bf = B.reshape(B.shape[:-2] + (-1,))
    R = Af.real @ np.swapaxes(Bf.real, -1, -2) + Af.imag @ np.swapaxes(Bf.imag, -1, -2)

    def vjp(g):
        gA = (g @ Bf).reshape(A.shape)
        gB = (np.swapaxes(g, -1, -2) @ Af).reshape(B.shape)
        return gA, gB

    return tape.record(R, (La, Lb), vjp)


def softmax_mix(tape: Tape, R: Var, V: Var, scale_by: float, causal: bool) -> Var:
    """Row-softmax of ``R * scale_by`` (future masked when causal) applied to ``V``."""
    scores = R.value * scale_by
    if causal:
        N, M = scores.shape[-2:]
        future = np.triu(np.ones((N, M), dtype=bool), k=1)
        scores = np.where(future, -np.inf, scores)
    scores = scores - scores.max(axis=-1, keepdims=True)
    A = np.exp(scores)
    A /= A.sum(axis=-1, keepdims=True)
    Vv = V.value

    def vjp(g):
        gV = np.swapaxes(A, -1, -2) @ g
        gA = g @ np.swapaxes(Vv, -1, -2)
        gS = A * (gA - (gA * A).sum(axis=-1, keepdims=True))
        return gS * scale_by, gV

    out = tape.record(A @ Vv, (R, V), vjp)
    out.name = "mix"
    return out, A


# ---------------------------------------------------------------------------
# gating


def concrete(tape: Tape, alpha: Var, gumbel, temperature: float, clamp: float = 1e-6) -> Var:
    """Relaxed Bernoulli mask ``sigmoid((logit(alpha) + g) / temperature)``.

    ``gumbel`` is a constant (reparameterisation); the temperature is a
    schedule value and receives no gradient.
    """
    av = alpha.value
    ac = np.clip(av, clamp, 1.0 - clamp)
    inside = (av > clamp) & (av < 1.0 - clamp)
    z = (np.log(ac) - np.log1p(-ac) + gumbel) / temperature
    m = core.sigmoid(z)

    def vjp(g):
        return (np.where(inside, g * m * (1.0 - m) / (temperature * ac * (1.0 - ac)), 0.0),)

    return tape.record(m, (alpha,), vjp)


# ---------------------------------------------------------------------------
# losses


def cross_entropy(tape: Tape, logits: Var, targets, ignore_index: int = -1) -> Var:
    """Mean token NLL over positions whose target is not ``ignore_index``."""
    lv = logits.value
    t = np.asarray(targets)
    valid = t != ignore_index
    V = lv.shape[-1]
    if np.any(t[valid] < 0) or np.any(t[valid] >= V):
        raise ValueError(f"target id out of range for vocabulary of size {V}")
    count = int(valid.sum())
    if count == 0:
        raise ValueError("no valid targets")
    shifted = lv - lv.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - logz
    safe = np.where(valid, t, 0)
    picked = np.take_along_axis(logp, safe[..., None], axis=-1)[..., 0]
    loss = -float(np.sum(np.where(valid, picked, 0.0))) / count

    def vjp(g):
        p = np.exp(logp)
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, safe[..., None], 1.0, axis=-1)
        return (g * (p - onehot) * valid[..., None] / count,)

    return tape.record(np.float64(loss), (logits,), vjp)


def reg_omega(tape: Tape, omega: Var, m: Var, weight: float) -> Var:
    w, mv = omega.value, m.value

    def vjp(g):
        return g * weight * np.sign(w) * mv, g * weight * np.abs(w)

    return tape.record(np.float64(weight * np.sum(np.abs(w) * mv)), (omega, m), vjp)


def reg_sigma(tape: Tape, sigma: Var, m: Var, weight: float) -> Var:
    """Smoothness of the sorted decay rates, gated by neighbouring masks."""
    sv, mv = sigma.value, m.value
    order = np.argsort(sv, kind="stable")
    ss, ms = sv[order], mv[order]
    diff = np.diff(ss)
    pair = ms[1:] * ms[:-1]
    value = weight * np.sum(diff * diff * pair)

    def vjp(g):
        gs_sorted = np.zeros_like(ss)
        gm_sorted = np.zeros_like(ms)
        t = 2.0 * diff * pair
        gs_sorted[1:] += t
        gs_sorted[:-1] -= t
        gm_sorted[1:] += diff * diff * ms[:-1]
        gm_sorted[:-1] += diff * diff * ms[1:]
        gs = np.zeros_like(sv)
        gm = np.zeros_like(mv)
        gs[order] = gs_sorted
        gm[order] = gm_sorted
        return g * weight * gs, g * weight * gm

    return tape.record(np.float64(value), (sigma, m), vjp)


def reg_mask(tape: Tape, m: Var, weight: float) -> Var:
    return tape.record(np.float64(weight * np.sum(m.value)), (m,), lambda g: (g * weight * np.ones_like(m.value),))
