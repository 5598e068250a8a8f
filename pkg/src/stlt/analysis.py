"""Error-theory experiments and learned-parameter diagnostics.

* Bromwich inversion of closed-form transforms by trapezoid quadrature,
  with the error split into quadrature and contour-truncation parts.
* Cutoff error of a finite rectangular window against full support.
* Loss response to controlled perturbations of the relevance matrices.
* CSV dumps of learned node banks.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field
from enum import Enum

import numpy as np
from scipy.special import wofz

from .adaptive import ALPHA_CLAMP, MaskMode, MaskPolicy
from .core import Mode, WindowKind, WindowSpec, direct_forward, half_lives, sigmoid
from .losses import RegWeights, objective
from .mixer import ModelParams, lm_logits, make_runtime

# ---------------------------------------------------------------------------
# Laplace inversion


class Signal(str, Enum):
    DECAYING_SINE = "decaying_sine"
    GAUSSIAN_PULSE = "gaussian_pulse"
    STEP = "step"


@dataclass(frozen=True)
class TestSignal:
    """A causal signal with its exact one-sided Laplace transform."""

    name: str
    f: object
    F: object


def make_signal(kind: Signal | str, a: float = 1.0, omega: float = 2.0, t0: float = 2.0, width: float = 0.5) -> TestSignal:
    kind = Signal(kind)
    if kind is Signal.DECAYING_SINE:
        return TestSignal(
            kind.value,
            lambda t: np.exp(-a * t) * np.sin(omega * t),
            lambda s: omega / ((s + a) ** 2 + omega**2),
        )
    if kind is Signal.GAUSSIAN_PULSE:
        # int_0^inf exp(-(t-t0)^2 / 2w^2 - s t) dt, written through the Faddeeva
        # function so it stays finite far up the contour
        w = width

        def F(s):
            z = (s * w * w - t0) / (math.sqrt(2.0) * w)
            return w * math.sqrt(math.pi / 2.0) * math.exp(-(t0 * t0) / (2 * w * w)) * wofz(1j * z)

        return TestSignal(kind.value, lambda t: np.exp(-((t - t0) ** 2) / (2 * w * w)), F)
    return TestSignal(kind.value, lambda t: np.ones_like(np.asarray(t, dtype=float)), lambda s: 1.0 / s)


def bromwich_trapezoid(F, t, S: int, B: float, gamma: float) -> np.ndarray:
    """``(1/2pi) * int_{-B}^{B} F(gamma + jy) exp((gamma + jy) t) dy`` by the S-point trapezoid rule."""
    if S < 2:
        raise ValueError("S must be >= 2")
    if not (B > 0 and gamma > 0):
        raise ValueError("B and gamma must be positive")
    y = np.linspace(-B, B, S)
    h = y[1] - y[0]
    wts = np.full(S, h)
    wts[[0, -1]] *= 0.5
    s = gamma + 1j * y
    t = np.atleast_1d(np.asarray(t, dtype=float))
    vals = F(s)[None, :] * np.exp(np.outer(t, s))
    return (vals @ wts).real / (2 * math.pi)


@dataclass(frozen=True)
class ErrorBoundReport:
    signal: str
    S: int
    B: float
    gamma: float
    T: float
    sigma_min: float
    E_trunc: float
    E_quad: float
    E_win: float
    E_total: float
    p: float = float("nan")

    @property
    def bound_holds(self) -> bool:
        return self.E_total <= self.E_trunc + self.E_quad + self.E_win + 1e-12 * max(1.0, self.E_total)

    def to_row(self) -> dict:
        return asdict(self)


DENSE_FACTOR = 64


def laplace_inversion_experiment(signal="decaying_sine", S: int = 64, B: float = 20.0, gamma: float = 0.5,
                                 quad: str = "trapezoid", t=None) -> ErrorBoundReport:
    """Invert an exactly known transform and split the reconstruction error.

    Errors are maxima over the reconstruction times ``t``.  ``E_quad`` is
    the gap to a quadrature 64 times denser on the same contour segment;
    ``E_trunc`` is the error of that dense reconstruction against the true
    signal, i.e. what remains from cutting the contour at ``+-B``.  No
    analysis window is involved, so ``E_win`` is zero and ``T`` infinite.
    """
    if quad != "trapezoid":
        raise ValueError(f"unsupported quadrature {quad!r}")
    sig = make_signal(signal)
    t = np.linspace(0.5, 3.0, 11) if t is None else np.asarray(t, dtype=float)
    approx = bromwich_trapezoid(sig.F, t, S, B, gamma)
    dense = bromwich_trapezoid(sig.F, t, DENSE_FACTOR * (S - 1) + 1, B, gamma)
    exact = sig.f(t)
    return ErrorBoundReport(
        signal=sig.name,
        S=S,
        B=B,
        gamma=gamma,
        T=math.inf,
        sigma_min=gamma,
        E_trunc=float(np.max(np.abs(dense - exact))),
        E_quad=float(np.max(np.abs(approx - dense))),
        E_win=0.0,
        E_total=float(np.max(np.abs(approx - exact))),
    )


def fit_loglog_slope(x, y) -> float:
    x = np.log(np.asarray(x, dtype=float))
    y = np.log(np.asarray(y, dtype=float))
    return float(np.polyfit(x, y, 1)[0])


def fit_order(reports) -> float:
    """Algebraic order ``p`` from ``E_quad ~ C * S^-p``."""
    return -fit_loglog_slope([r.S for r in reports], [r.E_quad for r in reports])


def quadrature_sweep(signal="decaying_sine", S_values=(16, 32, 64, 128, 256, 512, 1024), B: float = 4.0,
                     gamma: float = 0.5, t=None):
    """Reports over ``S_values`` at fixed ``B``, each stamped with the fitted order."""
    t = np.linspace(0.25, 1.0, 7) if t is None else t
    reps = [laplace_inversion_experiment(signal, S, B, gamma, t=t) for S in S_values]
    p = fit_order(reps)
    return [ErrorBoundReport(**{**r.to_row(), "p": p}) for r in reps], p


def truncation_sweep(signal="decaying_sine", B_values=(5.0, 10.0, 20.0, 40.0, 80.0), gamma: float = 0.5,
                     S_per_unit: float = 64.0, t=None):
    """Reports over ``B_values`` with node spacing held fixed, isolating the contour cutoff."""
    return [laplace_inversion_experiment(signal, int(S_per_unit * 2 * B) + 1, B, gamma, t=t) for B in B_values]


# ---------------------------------------------------------------------------
# window cutoff


def exponential_envelope_signal(N: int, d: int = 1, seed: int = 0, offset: float = 1.0, noise: float = 0.1) -> np.ndarray:
    """Positive offset plus small noise, so truncated tails of real exponentials never cancel."""
    rng = np.random.default_rng(seed)
    return offset + noise * rng.uniform(-1.0, 1.0, size=(N, d))


@dataclass
class CutoffCurve:
    T: np.ndarray
    error: np.ndarray
    sigma_min: float
    slope: float = float("nan")

    def rows(self):
        return [{"T": float(t), "error": float(e)} for t, e in zip(self.T, self.error)]


def window_cutoff_error(x, s, T: float, mode: Mode = Mode.UNILATERAL, delta: float = 1.0) -> float:
    full = direct_forward(x, s, 1.0, WindowSpec(WindowKind.EXPONENTIAL_ONLY), mode, delta)
    cut = direct_forward(x, s, float(T), WindowSpec(WindowKind.RECTANGULAR), mode, delta)
    return float(np.max(np.abs(full - cut)))


def window_cutoff_experiment(x, T_values, sigma_min: float, n_nodes: int = 4, s=None,
                             mode: Mode = Mode.UNILATERAL, delta: float = 1.0) -> CutoffCurve:
    """Max deviation of rectangular-window coefficients from full support, per ``T``.

    Default nodes are real decay rates ``sigma_min * 2^k``; the slowest one
    sets the tail.  The reported slope is the least-squares slope of
    ``log(error)`` against ``T`` over the nonzero errors.
    """
    x = np.asarray(x, dtype=float)
    if s is None:
        s = sigma_min * 2.0 ** np.arange(n_nodes) + 0j
    T_values = np.asarray(T_values, dtype=float)
    err = np.array([window_cutoff_error(x, s, T, mode, delta) for T in T_values])
    keep = err > 0
    slope = float(np.polyfit(T_values[keep], np.log(err[keep]), 1)[0]) if keep.sum() >= 2 else float("nan")
    return CutoffCurve(T_values, err, sigma_min, slope)


# ---------------------------------------------------------------------------
# relevance perturbation


def operator_norm(M, iters: int = 20, tol: float = 1e-6, seed: int = 0) -> float:
    """Largest singular value of ``M`` (or the max over a leading batch) by power iteration."""
    M = np.asarray(M, dtype=float)
    if M.ndim > 2:
        return max(operator_norm(m, iters, tol, seed) for m in M.reshape(-1, *M.shape[-2:]))
    if not np.any(M):
        return 0.0
    v = np.random.default_rng(seed).normal(size=M.shape[1])
    v /= np.linalg.norm(v)
    est = 0.0
    for _ in range(iters):
        w = M.T @ (M @ v)
        nrm = np.linalg.norm(w)
        if nrm == 0:
            return 0.0
        v = w / nrm
        new = math.sqrt(nrm)
        if abs(new - est) <= tol * max(new, 1e-300):
            est = new
            break
        est = new
    return float(np.linalg.norm(M @ v))


@dataclass(frozen=True)
class PerturbationRow:
    eps: float
    norm_dR: float
    loss: float
    delta_loss: float

    @property
    def ratio(self) -> float:
        return self.delta_loss / self.norm_dR if self.norm_dR > 0 else 0.0


def _eval_loss(params: ModelParams, tokens, targets, delta_R=None, policy=None, with_grad=False):
    policy = policy or MaskPolicy(MaskMode.DETERMINISTIC_EVAL, temperature=1.0)
    rt = make_runtime(params, policy, trainable=None if with_grad else (), delta_R=delta_R)
    logits = lm_logits(rt, tokens)
    loss, report = objective(rt, logits, targets, RegWeights(0.0, 0.0, 0.0))
    if with_grad:
        rt.tape.backward(loss)
    return report.task, rt


def relevance_perturbation(params: ModelParams, tokens, targets, eps_levels=(1e-3, 1e-2), policy=None):
    """Loss change when every relevance matrix moves by ``eps`` in operator norm.

    The perturbation of each block is its loss gradient with respect to ``R``
    rescaled to operator norm ``eps`` per sequence (the locally worst
    direction), so the measured response is first order in ``eps``.
    """
    base, rt = _eval_loss(params, tokens, targets, policy=policy, with_grad=True)
    directions = {}
    for prefix, R in rt.trace.relevance.items():
        G = np.zeros_like(R.value) if R.grad is None else np.asarray(R.grad, dtype=float)
        flat = G.reshape(-1, *G.shape[-2:])
        # rescale first so power iteration never sees subnormal entries
        peak = np.abs(flat).max(axis=(-2, -1), keepdims=True)
        flat = np.divide(flat, peak, out=np.zeros_like(flat), where=peak > 0)
        norms = np.array([operator_norm(g) for g in flat])
        norms = np.where(norms > 0, norms, 1.0)
        directions[prefix] = (flat / norms[:, None, None]).reshape(G.shape)
    rows = []
    for eps in eps_levels:
        dR = {k: eps * v for k, v in directions.items()}
        if eps == 0:
            rows.append(PerturbationRow(0.0, 0.0, base, 0.0))
            continue
        loss, _ = _eval_loss(params, tokens, targets, dR, policy)
        norm = max((operator_norm(v) for v in dR.values()), default=0.0)
        rows.append(PerturbationRow(float(eps), norm, loss, loss - base))
    return rows


# ---------------------------------------------------------------------------
# parameter dumps

DUMP_COLUMNS = ["layer", "node", "sigma", "omega", "t_half", "T", "alpha", "m_tilde", "s_eff"]


def param_dump_rows(params: ModelParams, temperature: float = 1.0):
    """One row per (layer, node) sorted by layer then ``sigma``.

    ``alpha`` is the gate at a zero pooled input, ``sigmoid(b_alpha)``, and
    ``m_tilde`` its noise-free relaxed mask at ``temperature``.  Ungated
    banks report ones.
    """
    rows = []
    for prefix in params.block_prefixes:
        bank = params.bank(prefix)
        b = params.arrays.get(f"{prefix}.b_alpha")
        if b is None:
            alpha = np.ones(bank.S_max)
            m = np.ones(bank.S_max)
        else:
            alpha = sigmoid(np.asarray(b, dtype=float))
            a = np.clip(alpha, ALPHA_CLAMP, 1 - ALPHA_CLAMP)
            m = sigmoid(np.log(a / (1 - a)) / temperature)
        s_eff = float(np.sum(m))
        order = np.argsort(bank.sigma, kind="stable")
        th = half_lives(bank)
        T = float(bank.T)
        for k in order:
            rows.append({
                "layer": prefix,
                "node": int(k),
                "sigma": float(bank.sigma[k]),
                "omega": float(bank.omega[k]),
                "t_half": float(th[k]),
                "T": T,
                "alpha": float(alpha[k]),
                "m_tilde": float(m[k]),
                "s_eff": s_eff,
            })
    return rows


def _layer_key(prefix: str):
    return tuple(int(p) if p.isdigit() else p for p in prefix.split("."))


def format_dump(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(DUMP_COLUMNS)
    for r in sorted(rows, key=lambda r: (_layer_key(r["layer"]), r["sigma"], r["node"])):
        w.writerow([r[c] if isinstance(r[c], (str, int)) else repr(r[c]) for c in DUMP_COLUMNS])
    return buf.getvalue()


def dump_params(checkpoint_path, out_path=None) -> str:
    """CSV text of the node banks stored in a training checkpoint; raises on corrupt files."""
    from .train import load_training_checkpoint

    _, params, _, lam = load_training_checkpoint(checkpoint_path)
    text = format_dump(param_dump_rows(params, lam))
    if out_path is not None:
        with open(out_path, "w", newline="") as fh:
            fh.write(text)
    return text


# ---------------------------------------------------------------------------
# report helpers


def rows_to_csv(rows, path=None) -> str:
    rows = [r if isinstance(r, dict) else asdict(r) for r in rows]
    buf = io.StringIO()
    if rows:
        w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    text = buf.getvalue()
    if path is not None:
        with open(path, "w", newline="") as fh:
            fh.write(text)
    return text


@dataclass
class SummaryTable:
    title: str
    header: list
    rows: list = field(default_factory=list)

    def render(self) -> str:
        cells = [[str(h) for h in self.header]] + [
            [f"{v:.4g}" if isinstance(v, float) else str(v) for v in r] for r in self.rows
        ]
        widths = [max(len(c[i]) for c in cells) for i in range(len(self.header))]
        lines = [self.title, "  ".join(h.rjust(w) for h, w in zip(cells[0], widths))]
        lines += ["  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in cells[1:]]
        return "\n".join(lines)
