"""Adaptive node allocation: importance scores, relaxed masks and S_eff."""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import ops
from .core import sigmoid
from .grad import Tape, Var

ALPHA_CLAMP = 1e-6


class MaskMode(str, Enum):
    STOCHASTIC = "stochastic"
    DETERMINISTIC_EVAL = "deterministic_eval"
    HARD_THRESHOLD = "hard_threshold"


class Pooling(str, Enum):
    MEAN = "mean"
    FIRST = "first"


@dataclass
class GateParams:
    W_alpha: np.ndarray  # (S_max, d)
    b_alpha: np.ndarray  # (S_max,)
    pooling: Pooling = Pooling.MEAN

    @classmethod
    def init(cls, S_max: int, d: int, rng: np.random.Generator, bias: float = 2.0, pooling=Pooling.MEAN):
        """Small random weights; a positive bias starts every node mostly open."""
        W = rng.normal(0.0, 0.02, size=(S_max, d))
        return cls(W, np.full(S_max, float(bias)), Pooling(pooling))


@dataclass
class NodeMask:
    alpha: np.ndarray
    gumbel: np.ndarray
    m_tilde: np.ndarray
    temperature: float
    mode: MaskMode
    threshold: float = 0.5

    @property
    def s_eff(self):
        return s_eff(self)


def pool(x: np.ndarray, pooling: Pooling = Pooling.MEAN) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return x.mean(axis=-2) if Pooling(pooling) is Pooling.MEAN else x[..., 0, :]


def importance_scores(x, g: GateParams) -> np.ndarray:
    """``alpha = sigmoid(W_alpha pool(x) + b_alpha)``, one score per node."""
    return sigmoid(pool(x, g.pooling) @ g.W_alpha.T + g.b_alpha)


def mask_generator(seed: int, stream: int = 0) -> np.random.Generator:
    """Counter-based (Philox) generator keyed by ``(seed, stream)``."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(stream)])))


def sample_gumbel(rng: np.random.Generator, shape) -> np.ndarray:
    u = rng.random(shape)
    u = np.clip(u, np.finfo(float).tiny, 1.0 - np.finfo(float).eps)
    return -np.log(-np.log(u))


def sample_mask(
    alpha,
    temperature: float,
    seed: int | None = 0,
    mode: MaskMode | str = MaskMode.STOCHASTIC,
    threshold: float = 0.5,
    gumbel: np.ndarray | None = None,
    stream: int = 0,
) -> NodeMask:
    """Relaxed (or hard) node mask from importance scores.

    Relaxed modes compute ``sigmoid((logit(alpha) + g) / temperature)`` with
    ``g ~ Gumbel(0, 1)`` (stochastic) or ``g = 0`` (deterministic_eval);
    ``hard_threshold`` returns ``1[alpha > threshold]``.
    """
    alpha = np.asarray(alpha, dtype=float)
    mode = MaskMode(mode)
    if not temperature > 0:
        raise ValueError("temperature must be positive")
    if mode is MaskMode.HARD_THRESHOLD:
        m = (alpha > threshold).astype(float)
        return NodeMask(alpha, np.zeros_like(alpha), m, temperature, mode, threshold)
    if np.any((alpha <= 0.0) | (alpha >= 1.0)):
        raise ValueError("alpha must lie strictly inside (0, 1); clamp before sampling")
    if gumbel is None:
        if mode is MaskMode.STOCHASTIC:
            gumbel = sample_gumbel(mask_generator(seed, stream), alpha.shape)
        else:
            gumbel = np.zeros_like(alpha)
    z = (np.log(alpha) - np.log1p(-alpha) + gumbel) / temperature
    return NodeMask(alpha, np.asarray(gumbel, dtype=float), sigmoid(z), temperature, mode, threshold)


def apply_mask(L: np.ndarray, mask: NodeMask | np.ndarray) -> np.ndarray:
    """Scale node ``k`` of every coefficient by ``m_tilde[k]``."""
    m = mask.m_tilde if isinstance(mask, NodeMask) else np.asarray(mask, dtype=float)
    if m.shape[-1] != L.shape[-2]:
        raise ValueError(f"mask has {m.shape[-1]} nodes, coefficients have {L.shape[-2]}")
    return L * m[..., None, :, None]


def s_eff(mask: NodeMask | np.ndarray):
    """Expected active node count; averaged over any batch axes."""
    m = mask.m_tilde if isinstance(mask, NodeMask) else np.asarray(mask, dtype=float)
    return float(np.mean(np.sum(m, axis=-1)))


def anneal_temperature(
    step: int, total_steps: int, start: float = 1.0, end: float = 0.1, fraction: float = 0.4
) -> float:
    """Linear ramp from ``start`` to ``end`` over the first ``fraction`` of training."""
    if total_steps <= 0:
        raise ValueError("total_steps must be positive")
    horizon = fraction * total_steps
    if horizon <= 0 or step >= horizon:
        return float(end)
    return float(start + (end - start) * max(step, 0) / horizon)


@dataclass
class MaskPolicy:
    """How a forward pass turns importance scores into node masks.

    ``overrides`` pins the mask of a block (keyed by block prefix) to a fixed
    array, bypassing the gate entirely.
    """

    mode: MaskMode = MaskMode.STOCHASTIC
    temperature: float = 1.0
    seed: int = 0
    threshold: float = 0.5
    overrides: dict = field(default_factory=dict)

    def __post_init__(self):
        self.mode = MaskMode(self.mode)


def gate(
    tape: Tape,
    x: Var,
    W_alpha: Var,
    b_alpha: Var,
    policy: MaskPolicy,
    stream: int,
    pooling: Pooling,
) -> tuple[Var, NodeMask]:
    """Taped gate: returns the mask factors as a Var plus the NodeMask record."""
    if Pooling(pooling) is Pooling.MEAN:
        pooled = ops.mean(tape, x, axis=-2)
    else:
        pooled = ops.take(tape, x, 0, axis=-2)
    alpha = ops.sigmoid(tape, ops.affine_t(tape, pooled, W_alpha, b_alpha))
    if policy.mode is MaskMode.HARD_THRESHOLD:
        nm = sample_mask(alpha.value, policy.temperature, mode=policy.mode, threshold=policy.threshold)
        return tape.const(nm.m_tilde), nm
    if policy.mode is MaskMode.STOCHASTIC:
        g = sample_gumbel(mask_generator(policy.seed, stream), alpha.value.shape)
    else:
        g = np.zeros_like(alpha.value)
    m = ops.concrete(tape, alpha, g, policy.temperature, ALPHA_CLAMP)
    nm = NodeMask(alpha.value, g, m.value, policy.temperature, policy.mode, policy.threshold)
    return m, nm
