"""STLT mixing blocks and the encoder/decoder stacks built from them.

A block replaces self-attention: STLT coefficients of the block input give
a relevance matrix ``R = Re <L_n, L_m>``, whose row softmax (scaled by
``1/sqrt(S_max)``) mixes a linear projection of the input.  Encoder blocks
use the bilateral transform; decoder blocks use the unilateral transform
and a causal softmax.

Parameters live in a flat ``{name: ndarray}`` mapping so that optimiser
state and checkpoints are plain dictionaries.  Block parameter names are
``<prefix>.<field>`` with prefixes ``layers.<i>`` (decoder-only LM),
``enc.<i>`` and ``dec.<i>.self`` / ``dec.<i>.cross`` (sequence-to-sequence).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import ops
from .adaptive import GateParams, MaskMode, MaskPolicy, NodeMask, Pooling, gate
from .core import EPS_SIGMA, T_MIN, LaplaceNodeBank, Mode, WindowSpec, init_bank
from .grad import Tape, Var

LAPLACE_FIELDS = ("sigma_raw", "omega", "T_raw")


@dataclass
class ModelConfig:
    vocab: int = 256
    d: int = 32
    d_ff: int = 128
    n_layers: int = 2
    n_enc_layers: int = 0
    S_max: int = 16
    sigma_min: float = 1e-3
    sigma_max: float = 1e1
    omega_max: float = math.pi
    T_init: float = 32.0
    delta: float = 1.0
    window: str = "exponential_only"
    route: str = "streaming"
    adaptive: bool = True
    gate_bias: float = 2.0
    embed_scale: float = 1.0

    @property
    def window_spec(self) -> WindowSpec:
        return WindowSpec(self.window)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        names = {f.name: f.type for f in fields(cls)}
        unknown = set(d) - set(names)
        if unknown:
            raise KeyError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class BlockParams:
    bank: LaplaceNodeBank
    W_v: np.ndarray
    ln1_g: np.ndarray
    ln1_b: np.ndarray
    W1: np.ndarray | None = None
    W2: np.ndarray | None = None
    ln2_g: np.ndarray | None = None
    ln2_b: np.ndarray | None = None
    gate: GateParams | None = None

    @classmethod
    def init(cls, cfg: ModelConfig, rng: np.random.Generator, ffn: bool = True, pooling=Pooling.MEAN) -> BlockParams:
        d, f = cfg.d, cfg.d_ff
        bank = init_bank(
            cfg.S_max,
            (cfg.sigma_min, cfg.sigma_max),
            cfg.omega_max,
            cfg.T_init,
            cfg.delta,
            seed=int(rng.integers(2**31)),
        )
        p = cls(
            bank=bank,
            W_v=rng.normal(0.0, 1.0 / math.sqrt(d), (d, d)),
            ln1_g=np.ones(d),
            ln1_b=np.zeros(d),
        )
        if ffn:
            p.W1 = rng.normal(0.0, 1.0 / math.sqrt(d), (d, f))
            p.W2 = rng.normal(0.0, 1.0 / math.sqrt(f), (f, d))
            p.ln2_g = np.ones(d)
            p.ln2_b = np.zeros(d)
        if cfg.adaptive:
            p.gate = GateParams.init(cfg.S_max, d, rng, cfg.gate_bias, pooling)
        return p

    def to_arrays(self, prefix: str = "") -> dict[str, np.ndarray]:
        out = {
            "sigma_raw": self.bank.sigma_raw,
            "omega": self.bank.omega,
            "T_raw": np.asarray(self.bank.T_raw),
            "W_v": self.W_v,
            "ln1_g": self.ln1_g,
            "ln1_b": self.ln1_b,
        }
        if self.W1 is not None:
            out.update(W1=self.W1, W2=self.W2, ln2_g=self.ln2_g, ln2_b=self.ln2_b)
        if self.gate is not None:
            out.update(W_alpha=self.gate.W_alpha, b_alpha=self.gate.b_alpha)
        return {_join(prefix, k): np.array(v, dtype=float) for k, v in out.items()}

    @classmethod
    def from_arrays(cls, arrays, prefix: str = "", delta: float = 1.0, pooling=Pooling.MEAN) -> BlockParams:
        a = lambda k: arrays.get(_join(prefix, k))  # noqa: E731
        bank = LaplaceNodeBank(a("sigma_raw"), a("omega"), float(a("T_raw")), delta=delta)
        p = cls(bank=bank, W_v=a("W_v"), ln1_g=a("ln1_g"), ln1_b=a("ln1_b"))
        if a("W1") is not None:
            p.W1, p.W2, p.ln2_g, p.ln2_b = a("W1"), a("W2"), a("ln2_g"), a("ln2_b")
        if a("W_alpha") is not None:
            p.gate = GateParams(a("W_alpha"), a("b_alpha"), Pooling(pooling))
        return p


def _join(prefix: str, name: str) -> str:
    return f"{prefix}.{name}" if prefix else name


@dataclass
class ModelParams:
    config: ModelConfig
    arrays: dict[str, np.ndarray]

    def block(self, prefix: str) -> BlockParams:
        pooling = Pooling.MEAN if prefix.startswith("enc") else Pooling.FIRST
        return BlockParams.from_arrays(self.arrays, prefix, self.config.delta, pooling)

    def bank(self, prefix: str) -> LaplaceNodeBank:
        a = self.arrays
        return LaplaceNodeBank(
            a[f"{prefix}.sigma_raw"], a[f"{prefix}.omega"], float(a[f"{prefix}.T_raw"]), delta=self.config.delta
        )

    @property
    def block_prefixes(self) -> list[str]:
        return sorted({k.rsplit(".", 1)[0] for k in self.arrays if k.endswith(".sigma_raw")}, key=_prefix_key)

    def copy(self) -> ModelParams:
        return ModelParams(ModelConfig(**self.config.to_dict()), {k: v.copy() for k, v in self.arrays.items()})


def _prefix_key(prefix: str):
    return tuple(int(p) if p.isdigit() else p for p in prefix.split("."))


def init_lm(cfg: ModelConfig, seed: int = 0) -> ModelParams:
    """Decoder-only language model: embedding, ``n_layers`` causal blocks, readout."""
    rng = np.random.default_rng(seed)
    arrays = {"embed": rng.normal(0.0, cfg.embed_scale, (cfg.vocab, cfg.d))}
    for i in range(cfg.n_layers):
        arrays.update(BlockParams.init(cfg, rng, pooling=Pooling.FIRST).to_arrays(f"layers.{i}"))
    arrays["ln_f.g"] = np.ones(cfg.d)
    arrays["ln_f.b"] = np.zeros(cfg.d)
    arrays["W_o"] = rng.normal(0.0, 0.02, (cfg.d, cfg.vocab))
    return ModelParams(cfg, arrays)


def init_seq2seq(cfg: ModelConfig, seed: int = 0) -> ModelParams:
    rng = np.random.default_rng(seed)
    arrays = {"embed": rng.normal(0.0, cfg.embed_scale, (cfg.vocab, cfg.d))}
    for i in range(cfg.n_enc_layers):
        arrays.update(BlockParams.init(cfg, rng, pooling=Pooling.MEAN).to_arrays(f"enc.{i}"))
    for i in range(cfg.n_layers):
        arrays.update(BlockParams.init(cfg, rng, pooling=Pooling.FIRST).to_arrays(f"dec.{i}.self"))
        arrays.update(BlockParams.init(cfg, rng, ffn=False, pooling=Pooling.FIRST).to_arrays(f"dec.{i}.cross"))
    arrays["ln_f.g"] = np.ones(cfg.d)
    arrays["ln_f.b"] = np.zeros(cfg.d)
    arrays["W_o"] = rng.normal(0.0, 0.02, (cfg.d, cfg.vocab))
    return ModelParams(cfg, arrays)


def positional_encoding(N: int, d: int) -> np.ndarray:
    """Fixed sinusoidal table: sin on even channels, cos on odd channels."""
    pos = np.arange(N)[:, None]
    i = np.arange(d)[None, :]
    freq = 1.0 / 10000.0 ** ((i - i % 2) / d)
    return np.where(i % 2 == 0, np.sin(pos * freq), np.cos(pos * freq))


# ---------------------------------------------------------------------------
# numpy-level mixing primitives


def relevance(L_a, L_b, mask: NodeMask | np.ndarray | None = None) -> np.ndarray:
    """``R[n, m] = Re sum_k m_k^2 sum_i L_a[n,k,i] conj(L_b[m,k,i])``."""
    L_a, L_b = np.asarray(L_a), np.asarray(L_b)
    if L_a.shape[-2:] != L_b.shape[-2:]:
        raise ValueError(f"coefficient shapes {L_a.shape} and {L_b.shape} disagree in (S, d)")
    tape = Tape()
    a, b = tape.const(L_a.astype(complex)), tape.const(L_b.astype(complex))
    if mask is not None:
        m = tape.const(mask.m_tilde if isinstance(mask, NodeMask) else np.asarray(mask, dtype=float))
        a, b = ops.scale_nodes(tape, a, m), ops.scale_nodes(tape, b, m)
    return ops.relevance(tape, a, b).value


def mix(R, V, S: int, causal: bool = False) -> np.ndarray:
    """``softmax(R / sqrt(S)) @ V`` row-wise, future masked when ``causal``."""
    tape = Tape()
    Z, _ = ops.softmax_mix(tape, tape.const(np.asarray(R, dtype=float)), tape.const(np.asarray(V, dtype=float)), 1.0 / math.sqrt(S), causal)
    return Z.value


def mix_weights(R, S: int, causal: bool = False) -> np.ndarray:
    R = np.asarray(R, dtype=float)
    tape = Tape()
    _, A = ops.softmax_mix(tape, tape.const(R), tape.const(np.zeros(R.shape[:-1] + (1,))), 1.0 / math.sqrt(S), causal)
    return A


# ---------------------------------------------------------------------------
# taped forward pass


@dataclass
class Trace:
    """Per-block diagnostics collected during one forward pass."""

    masks: dict[str, NodeMask] = field(default_factory=dict)
    mask_vars: dict[str, Var] = field(default_factory=dict)
    sigma: dict[str, Var] = field(default_factory=dict)
    relevance: dict[str, Var] = field(default_factory=dict)
    weights: dict[str, np.ndarray] = field(default_factory=dict)

    def s_eff(self) -> dict[str, float]:
        return {k: float(np.mean(np.sum(v.value, axis=-1))) for k, v in self.mask_vars.items()}


@dataclass
class Runtime:
    """Everything a taped forward pass needs besides the input."""

    tape: Tape
    P: dict[str, Var]
    cfg: ModelConfig
    policy: MaskPolicy | None
    trace: Trace
    delta_R: dict[str, np.ndarray] | None = None
    streams: dict[str, int] = field(default_factory=dict)

    def stream(self, prefix: str) -> int:
        return self.streams.setdefault(prefix, len(self.streams))


def _node_mask(rt: Runtime, prefix: str, x: Var, pooling: Pooling) -> Var | None:
    tape, P = rt.tape, rt.P
    pol = rt.policy
    if pol is not None and prefix in pol.overrides:
        m = np.asarray(pol.overrides[prefix], dtype=float)
        if m.ndim == 1 and x.value.ndim == 3:
            m = np.broadcast_to(m, (x.value.shape[0], m.shape[0])).copy()
        mv = tape.const(m)
        rt.trace.masks[prefix] = NodeMask(m, np.zeros_like(m), m, pol.temperature, pol.mode, pol.threshold)
        rt.trace.mask_vars[prefix] = mv
        return mv
    if not rt.cfg.adaptive or _join(prefix, "W_alpha") not in P:
        return None
    pol = pol or MaskPolicy(MaskMode.DETERMINISTIC_EVAL)
    mv, nm = gate(tape, x, P[_join(prefix, "W_alpha")], P[_join(prefix, "b_alpha")], pol, rt.stream(prefix), pooling)
    rt.trace.masks[prefix] = nm
    rt.trace.mask_vars[prefix] = mv
    return mv


def _stlt_mix(rt: Runtime, prefix: str, xq: Var, causal: bool, xk: Var | None = None) -> Var:
    tape, P, cfg = rt.tape, rt.P, rt.cfg
    spec = cfg.window_spec
    sigma = ops.softplus_floor(tape, P[_join(prefix, "sigma_raw")], EPS_SIGMA)
    T = ops.softplus_floor(tape, P[_join(prefix, "T_raw")], T_MIN * cfg.delta)
    omega = P[_join(prefix, "omega")]
    rt.trace.sigma[prefix] = sigma

    q_mode = Mode.UNILATERAL if causal else Mode.BILATERAL
    Lq = ops.stlt(tape, xq, sigma, omega, T, q_mode, spec, cfg.route, cfg.delta)
    Lk = Lq if xk is None else ops.stlt(tape, xk, sigma, omega, T, Mode.BILATERAL, spec, cfg.route, cfg.delta)

    pooling = Pooling.MEAN if (xk is None and not causal) else Pooling.FIRST
    m = _node_mask(rt, prefix, xq, pooling)
    if m is not None:
        Lq_m = ops.scale_nodes(tape, Lq, m)
        Lk_m = Lq_m if xk is None else ops.scale_nodes(tape, Lk, m)
    else:
        Lq_m, Lk_m = Lq, Lk

    R = ops.relevance(tape, Lq_m, Lk_m)
    rt.trace.relevance[prefix] = R
    if rt.delta_R is not None and prefix in rt.delta_R:
        R = ops.add_const(tape, R, rt.delta_R[prefix])
    V = ops.matmul(tape, xk if xk is not None else xq, P[_join(prefix, "W_v")])
    Z, A = ops.softmax_mix(tape, R, V, 1.0 / math.sqrt(cfg.S_max), causal=causal and xk is None)
    rt.trace.weights[prefix] = A
    return Z


def _ffn_tail(rt: Runtime, prefix: str, y1: Var) -> Var:
    tape, P = rt.tape, rt.P
    h = ops.gelu(tape, ops.matmul(tape, y1, P[_join(prefix, "W1")]))
    f = ops.matmul(tape, h, P[_join(prefix, "W2")])
    return ops.layer_norm(tape, ops.add(tape, y1, f), P[_join(prefix, "ln2_g")], P[_join(prefix, "ln2_b")])


def block_forward(rt: Runtime, prefix: str, x: Var, causal: bool) -> Var:
    """``LN2(y + W2 GELU(W1 y))`` with ``y = LN1(x + softmax(R / sqrt(S)) V)``."""
    tape, P = rt.tape, rt.P
    Z = _stlt_mix(rt, prefix, x, causal)
    y1 = ops.layer_norm(tape, ops.add(tape, x, Z), P[_join(prefix, "ln1_g")], P[_join(prefix, "ln1_b")])
    return _ffn_tail(rt, prefix, y1)


def decoder_forward(rt: Runtime, prefix: str, y: Var, enc_out: Var) -> Var:
    """Causal self block, then cross mixing over encoder states, then the FFN."""
    tape, P = rt.tape, rt.P
    self_p, cross_p = f"{prefix}.self", f"{prefix}.cross"
    Z = _stlt_mix(rt, self_p, y, causal=True)
    h = ops.layer_norm(tape, ops.add(tape, y, Z), P[_join(self_p, "ln1_g")], P[_join(self_p, "ln1_b")])
    Zc = _stlt_mix(rt, cross_p, h, causal=True, xk=enc_out)
    h2 = ops.layer_norm(tape, ops.add(tape, h, Zc), P[_join(cross_p, "ln1_g")], P[_join(cross_p, "ln1_b")])
    return _ffn_tail(rt, self_p, h2)


def _embed(rt: Runtime, tokens) -> Var:
    tokens = np.asarray(tokens)
    x = ops.embedding(rt.tape, rt.P["embed"], tokens)
    return ops.add_const(rt.tape, x, positional_encoding(tokens.shape[-1], rt.cfg.d))


def _readout(rt: Runtime, x: Var) -> Var:
    tape, P = rt.tape, rt.P
    return ops.matmul(tape, ops.layer_norm(tape, x, P["ln_f.g"], P["ln_f.b"]), P["W_o"])


def make_runtime(params: ModelParams, policy=None, tape: Tape | None = None, trainable=None, delta_R=None) -> Runtime:
    """Wrap parameters as tape variables.

    ``trainable`` (default: all) selects which arrays are registered as
    parameters; the rest enter as constants.
    """
    tape = tape or Tape()
    P = {}
    for name, value in params.arrays.items():
        if trainable is None or name in trainable:
            P[name] = tape.param(name, value)
        else:
            P[name] = tape.const(np.asarray(value, dtype=float))
    return Runtime(tape, P, params.config, policy, Trace(), delta_R)


def lm_logits(rt: Runtime, tokens) -> Var:
    tokens = np.asarray(tokens)
    if tokens.ndim not in (1, 2):
        raise ValueError("tokens must be (N,) or (B, N)")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= rt.cfg.vocab):
        raise ValueError(f"token id out of range for vocabulary of size {rt.cfg.vocab}")
    x = _embed(rt, tokens)
    for i in range(rt.cfg.n_layers):
        x = block_forward(rt, f"layers.{i}", x, causal=True)
    return _readout(rt, x)


def forward_lm(tokens, params: ModelParams, masks: MaskPolicy | None = None, delta_R=None) -> np.ndarray:
    """Next-token logits of shape ``tokens.shape + (vocab,)``.

    Position ``n`` depends on tokens ``<= n`` only: blocks use the
    unilateral transform with a causal softmax, and gates pool the first
    position rather than the whole sequence.
    """
    rt = make_runtime(params, masks, trainable=(), delta_R=delta_R)
    return lm_logits(rt, tokens).value


def seq2seq_logits(rt: Runtime, src, tgt) -> Var:
    enc = _embed(rt, src)
    for i in range(rt.cfg.n_enc_layers):
        enc = block_forward(rt, f"enc.{i}", enc, causal=False)
    y = _embed(rt, tgt)
    for i in range(rt.cfg.n_layers):
        y = decoder_forward(rt, f"dec.{i}", y, enc)
    return _readout(rt, y)


def forward_seq2seq(src, tgt, params: ModelParams, masks: MaskPolicy | None = None) -> np.ndarray:
    rt = make_runtime(params, masks, trainable=())
    return seq2seq_logits(rt, src, tgt).value


# ---------------------------------------------------------------------------
# numpy-level block wrappers


def _block_runtime(cfg: ModelConfig, blocks: dict[str, BlockParams], masks: dict) -> Runtime:
    tape = Tape()
    P = {}
    for prefix, p in blocks.items():
        P.update({k: tape.const(v) for k, v in p.to_arrays(prefix).items()})
    overrides = {}
    for prefix, m in masks.items():
        if m is not None:
            overrides[prefix] = m.m_tilde if isinstance(m, NodeMask) else np.asarray(m, dtype=float)
    policy = MaskPolicy(MaskMode.DETERMINISTIC_EVAL, overrides=overrides)
    return Runtime(tape, P, cfg, policy, Trace())


def _block_cfg(p: BlockParams, window, route) -> ModelConfig:
    d = p.W_v.shape[0]
    return ModelConfig(
        d=d,
        S_max=p.bank.S_max,
        delta=p.bank.delta,
        window=window,
        route=route,
        adaptive=False,
    )


def encoder_block(x, p: BlockParams, mask=None, window: str = "exponential_only", route: str = "streaming") -> np.ndarray:
    """One bilateral block on a ``(N, d)`` or ``(B, N, d)`` sequence.

    ``mask`` is a NodeMask or an array of per-node factors; ``None`` keeps
    every node fully active.
    """
    rt = _block_runtime(_block_cfg(p, window, route), {"blk": p}, {"blk": mask})
    return block_forward(rt, "blk", rt.tape.const(np.asarray(x, dtype=float)), causal=False).value


def causal_block(x, p: BlockParams, mask=None, window: str = "exponential_only", route: str = "streaming") -> np.ndarray:
    rt = _block_runtime(_block_cfg(p, window, route), {"blk": p}, {"blk": mask})
    return block_forward(rt, "blk", rt.tape.const(np.asarray(x, dtype=float)), causal=True).value


def decoder_block(y, enc_out, p_self: BlockParams, p_cross: BlockParams, masks=(None, None),
                  window: str = "exponential_only", route: str = "streaming") -> np.ndarray:
    """Masked self block, cross block over ``enc_out``, then the FFN of ``p_self``."""
    cfg = _block_cfg(p_self, window, route)
    rt = _block_runtime(cfg, {"d.self": p_self, "d.cross": p_cross}, {"d.self": masks[0], "d.cross": masks[1]})
    c = rt.tape.const
    return decoder_forward(rt, "d", c(np.asarray(y, dtype=float)), c(np.asarray(enc_out, dtype=float))).value
