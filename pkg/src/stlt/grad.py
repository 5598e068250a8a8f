"""Coarse-grained reverse-mode differentiation and a finite-difference oracle.

Each differentiable operation records its output together with a
vector-Jacobian product closure.  Because records are appended in execution
order, replaying them backwards is a valid reverse topological order.

Complex-valued nodes carry gradients in the ``dl/dRe + j dl/dIm``
convention, so a real loss ``l`` changes by ``Re(conj(g) dz)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class NonFiniteGradientError(FloatingPointError):
    pass


class Var:
    __slots__ = ("value", "grad", "name", "requires_grad")

    def __init__(self, value, name: str | None = None, requires_grad: bool = False):
        self.value = value
        self.grad = None
        self.name = name
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return np.shape(self.value)

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Var{tag}(shape={self.shape}, requires_grad={self.requires_grad})"


VJP = Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    records: list = field(default_factory=list)
    params: dict = field(default_factory=dict)

    def param(self, name: str, value) -> Var:
        v = Var(np.array(value, dtype=float), name=name, requires_grad=True)
        self.params[name] = v
        return v

    def const(self, value) -> Var:
        return value if isinstance(value, Var) else Var(value)

    def record(self, value, parents: Sequence[Var], vjp: VJP) -> Var:
        out = Var(value, requires_grad=any(p.requires_grad for p in parents))
        if out.requires_grad:
            self.records.append((out, tuple(parents), vjp))
        return out

    def backward(self, loss: Var, check_finite: bool = True) -> dict[str, np.ndarray]:
        """Reverse sweep from a scalar ``loss``; returns gradients by parameter name.

        Parameters that the loss does not depend on get an explicit zero array.
        """
        for out, parents, _ in self.records:
            out.grad = None
            for p in parents:
                p.grad = None
        loss.grad = np.ones_like(np.asarray(loss.value, dtype=float))
        for out, parents, vjp in reversed(self.records):
            if out.grad is None:
                continue
            for p, g in zip(parents, vjp(out.grad)):
                if g is None or not p.requires_grad:
                    continue
                p.grad = g if p.grad is None else p.grad + g

        grads = {}
        for name, v in self.params.items():
            g = np.zeros_like(v.value) if v.grad is None else np.asarray(v.grad, dtype=float)
            if g.shape != v.value.shape:
                raise ValueError(f"gradient shape {g.shape} != parameter shape {v.value.shape} for {name}")
            grads[name] = g
        if check_finite:
            bad = [n for n, g in grads.items() if not np.all(np.isfinite(g))]
            if bad:
                raise NonFiniteGradientError(f"non-finite gradient for {', '.join(bad)}")
        return grads


def finite_diff_oracle(f, theta, h: float | np.ndarray | None = None) -> np.ndarray:
    """Central differences ``(f(theta + h e_i) - f(theta - h e_i)) / 2h``.

    ``h`` defaults to ``1e-4 * max(1, |theta_i|)`` per coordinate.  ``f`` must
    be deterministic (freeze any sampled noise before calling).
    """
    theta = np.array(theta, dtype=float)
    flat = theta.reshape(-1)
    if h is None:
        steps = 1e-4 * np.maximum(1.0, np.abs(flat))
    else:
        steps = np.broadcast_to(np.asarray(h, dtype=float), flat.shape).copy()
    grad = np.empty_like(flat)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + steps[i]
        fp = f(theta)
        flat[i] = old - steps[i]
        fm = f(theta)
        flat[i] = old
        grad[i] = (fp - fm) / (2 * steps[i])
    return grad.reshape(theta.shape)


def relative_error(analytic, numeric) -> np.ndarray:
    analytic = np.asarray(analytic, dtype=float)
    numeric = np.asarray(numeric, dtype=float)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return np.abs(analytic - numeric) / denom


@dataclass
class GradCheckReport:
    h_scale: float
    max_rel: dict[str, float]
    mean_rel: dict[str, float]

    @property
    def worst(self) -> float:
        return max(self.max_rel.values(), default=0.0)

    def passed(self, tol: float = 1e-4) -> bool:
        return self.worst <= tol

    def table(self) -> str:
        width = max([len(k) for k in self.max_rel] + [5])
        lines = [f"{'group':<{width}}  {'max_rel':>10}  {'mean_rel':>10}"]
        for k in self.max_rel:
            lines.append(f"{k:<{width}}  {self.max_rel[k]:10.3e}  {self.mean_rel[k]:10.3e}")
        lines.append(f"{'worst':<{width}}  {self.worst:10.3e}  (h = {self.h_scale:g} * max(1, |theta|))")
        return "\n".join(lines)


def gradcheck(loss_fn, params: dict[str, np.ndarray], analytic: dict[str, np.ndarray], group=None) -> GradCheckReport:
    """Compare ``analytic`` gradients with central differences of ``loss_fn(params)``.

    ``group`` maps a parameter name to its report row (default: the name
    with any ``layers.<i>.`` prefix removed).
    """
    group = group or _default_group
    errs: dict[str, list[np.ndarray]] = {}
    for name, value in params.items():
        def f(theta, name=name):
            trial = dict(params)
            trial[name] = theta
            return loss_fn(trial)

        numeric = finite_diff_oracle(f, value)
        errs.setdefault(group(name), []).append(relative_error(analytic[name], numeric).ravel())
    max_rel = {k: float(np.max(np.concatenate(v))) for k, v in errs.items()}
    mean_rel = {k: float(np.mean(np.concatenate(v))) for k, v in errs.items()}
    return GradCheckReport(h_scale=1e-4, max_rel=max_rel, mean_rel=mean_rel)


def _default_group(name: str) -> str:
    parts = name.split(".")
    if len(parts) >= 3 and parts[1].isdigit():
        return ".".join(parts[2:])
    return name
