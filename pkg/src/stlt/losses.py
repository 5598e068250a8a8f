"""Task loss, node regularizers and the combined training objective."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .adaptive import NodeMask
from .core import LaplaceNodeBank
from .grad import Tape
from .ops import cross_entropy as _ce_op


@dataclass(frozen=True)
class RegWeights:
    omega: float = 1e-4
    sigma: float = 1e-4
    mask: float = 1e-3

    def __post_init__(self):
        if min(self.omega, self.sigma, self.mask) < 0:
            raise ValueError("regularization weights must be non-negative")


@dataclass(frozen=True)
class LossReport:
    task: float
    reg_omega: float
    reg_sigma: float
    reg_mask: float
    total: float

    @classmethod
    def build(cls, task: float, reg_omega: float = 0.0, reg_sigma: float = 0.0, reg_mask: float = 0.0):
        return cls(task, reg_omega, reg_sigma, reg_mask, task + reg_omega + reg_sigma + reg_mask)

    @property
    def perplexity(self) -> float:
        return float(np.exp(self.task))


def cross_entropy(logits, targets, ignore_index: int = -1) -> float:
    tape = Tape()
    return float(_ce_op(tape, tape.const(np.asarray(logits, dtype=float)), targets, ignore_index).value)


def _mask_values(mask, S):
    if mask is None:
        return np.ones(S)
    m = mask.m_tilde if isinstance(mask, NodeMask) else np.asarray(mask, dtype=float)
    return m.reshape(-1, S).mean(axis=0) if m.ndim > 1 else m


def regularization(bank: LaplaceNodeBank, mask: NodeMask | np.ndarray | None, w: RegWeights):
    """Return ``(reg_omega, reg_sigma, reg_mask)`` for one node bank.

    The smoothness term sorts the effective decay rates and permutes the
    masks alongside, so the parameterisation itself stays unconstrained.
    Batched masks are averaged over the batch first.
    """
    m = _mask_values(mask, bank.S_max)
    reg_omega = w.omega * float(np.sum(np.abs(bank.omega) * m))
    order = np.argsort(bank.sigma, kind="stable")
    ss, ms = bank.sigma[order], m[order]
    reg_sigma = w.sigma * float(np.sum(np.diff(ss) ** 2 * ms[1:] * ms[:-1]))
    reg_mask = w.mask * float(np.sum(m))
    return reg_omega, reg_sigma, reg_mask


def total_loss(task: float, regs=(0.0, 0.0, 0.0)) -> LossReport:
    return LossReport.build(float(task), *map(float, regs))


def objective(rt, logits, targets, w: RegWeights, ignore_index: int = -1):
    """Taped total loss for a forward pass recorded in ``rt`` (a mixer Runtime).

    Regularizers are summed over every STLT block seen in the trace; blocks
    without a gate count all nodes as fully active.  Returns ``(total_var,
    LossReport)``.
    """
    from . import ops

    tape = rt.tape
    task = _ce_op(tape, logits, targets, ignore_index)
    terms_o, terms_s, terms_m = [], [], []
    for prefix, sigma in rt.trace.sigma.items():
        mv = rt.trace.mask_vars.get(prefix)
        if mv is None:
            m = tape.const(np.ones(rt.cfg.S_max))
        elif mv.value.ndim > 1:
            m = ops.mean(tape, mv, axis=0)
        else:
            m = mv
        terms_o.append(ops.reg_omega(tape, rt.P[f"{prefix}.omega"], m, w.omega))
        terms_s.append(ops.reg_sigma(tape, sigma, m, w.sigma))
        terms_m.append(ops.reg_mask(tape, m, w.mask))
    parts = [ops.total(tape, *t) if t else tape.const(np.float64(0.0)) for t in (terms_o, terms_s, terms_m)]
    total = ops.total(tape, task, *parts)
    report = LossReport(float(task.value), *(float(p.value) for p in parts), float(total.value))
    return total, report
