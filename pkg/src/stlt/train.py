"""Training harness: AdamW, schedules, the training loop and evaluation."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from .adaptive import MaskMode, MaskPolicy, anneal_temperature
from .grad import NonFiniteGradientError
from .losses import RegWeights, objective
from .mixer import LAPLACE_FIELDS, ModelConfig, ModelParams, init_lm, lm_logits, make_runtime
from .tasks import IGNORE, ByteCorpus, gen_copy_task, gen_oscillatory_recall

log = logging.getLogger(__name__)

TASKS = ("copy", "oscillatory_recall", "char_lm")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    task: str = "copy"
    steps: int = 2000
    batch: int = 16
    seq_len: int = 32
    vocab: int = 16
    delay: int = 16
    period: int = 8
    corpus: str = ""
    lr: float = 3e-4
    betas: tuple = (0.9, 0.98)
    adam_eps: float = 1e-8
    weight_decay: float = 0.01
    warmup_steps: int = 500
    clip_norm: float = 1.0
    seed: int = 0
    # model
    d: int = 32
    d_ff: int = 128
    n_layers: int = 2
    S_max: int = 16
    sigma_min: float = 1e-3
    sigma_max: float = 1e1
    omega_max: float = math.pi
    T_init: float = 32.0
    window: str = "exponential_only"
    route: str = "streaming"
    adaptive: bool = True
    gate_bias: float = 2.0
    embed_scale: float = 1.0
    # objective and schedules
    reg_omega: float = 1e-4
    reg_sigma: float = 1e-4
    reg_mask: float = 1e-3
    anneal_start: float = 1.0
    anneal_end: float = 0.1
    anneal_fraction: float = 0.4
    param_lr_scale: float = 0.1
    learn_omega: bool = True
    learn_sigma: bool = True
    learn_T: bool = True
    # bookkeeping
    log_every: int = 50
    ckpt_every: int = 0
    eval_batch: int = 64
    # evaluate every ``eval_every`` steps; stop once accuracy reaches ``stop_accuracy`` (0 disables)
    eval_every: int = 0
    stop_accuracy: float = 0.0

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        self.betas = tuple(float(b) for b in self.betas)
        if len(self.betas) != 2 or not all(0 < b < 1 for b in self.betas):
            raise ValueError("betas must be two numbers in (0, 1)")
        if not 0 < self.anneal_fraction <= 1:
            raise ValueError("anneal_fraction must lie in (0, 1]")
        if self.steps < 0 or self.warmup_steps < 1:
            raise ValueError("steps must be >= 0 and warmup_steps >= 1")

    @property
    def reg(self) -> RegWeights:
        return RegWeights(self.reg_omega, self.reg_sigma, self.reg_mask)

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            vocab=256 if self.task == "char_lm" else self.vocab,
            d=self.d,
            d_ff=self.d_ff,
            n_layers=self.n_layers,
            S_max=self.S_max,
            sigma_min=self.sigma_min,
            sigma_max=self.sigma_max,
            omega_max=self.omega_max if self.learn_omega else 0.0,
            T_init=self.T_init,
            window=self.window,
            route=self.route,
            adaptive=self.adaptive,
            gate_bias=self.gate_bias,
            embed_scale=self.embed_scale,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise KeyError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------------------
# flat key=value config files


def _parse_value(text: str, default):
    text = text.strip()
    if isinstance(default, bool):
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    if isinstance(default, tuple):
        return tuple(float(t) for t in text.split(","))
    return text


def apply_overrides(cfg: TrainConfig, pairs) -> TrainConfig:
    """Apply ``key=value`` strings on top of ``cfg``; unknown keys raise KeyError."""
    values = cfg.to_dict()
    defaults = {f.name: getattr(cfg, f.name) for f in fields(cfg)}
    for pair in pairs:
        if "=" not in pair:
            raise ValueError(f"expected key=value, got {pair!r}")
        key, _, raw = pair.partition("=")
        key = key.strip()
        if key not in defaults:
            raise KeyError(f"unknown config key {key!r}")
        values[key] = _parse_value(raw, defaults[key])
    return TrainConfig.from_dict(values)


def read_config(path) -> TrainConfig:
    lines = []
    for raw in Path(path).read_text().splitlines():
        line = raw.split("#", 1)[0].strip()
        if line:
            lines.append(line)
    return apply_overrides(TrainConfig(), lines)


def write_config(cfg: TrainConfig, path) -> None:
    rows = []
    for k, v in cfg.to_dict().items():
        if isinstance(v, list):
            v = ",".join(repr(float(x)) for x in v)
        rows.append(f"{k}={v}")
    Path(path).write_text("\n".join(rows) + "\n")


# ---------------------------------------------------------------------------
# optimisation


def lr_schedule(step: int, warmup: int, lr_peak: float) -> float:
    """Linear warmup to ``lr_peak`` then inverse-square-root decay (steps count from 1)."""
    if warmup < 1:
        raise ValueError("warmup must be >= 1")
    step = max(int(step), 1)
    if step <= warmup:
        return lr_peak * step / warmup
    return lr_peak * math.sqrt(warmup / step)


def is_laplace(name: str) -> bool:
    return name.rsplit(".", 1)[-1] in LAPLACE_FIELDS


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adamw_step(params: dict, grads: dict, state: AdamState, lr_t: float, config: TrainConfig) -> None:
    """In-place decoupled-weight-decay Adam update.

    Laplace parameters (``sigma_raw``, ``omega``, ``T_raw``) step with
    ``lr_t * param_lr_scale`` and are never decayed.  Parameters missing
    from ``grads`` are left untouched.
    """
    b1, b2 = config.betas
    bad = [k for k, g in grads.items() if not np.all(np.isfinite(g))]
    if bad:
        raise NonFiniteGradientError(f"non-finite gradient for {', '.join(bad)}")
    state.t += 1
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name, g in grads.items():
        p = params[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if is_laplace(name):
            lr, wd = lr_t * config.param_lr_scale, 0.0
        else:
            lr, wd = lr_t, config.weight_decay
        update = (m / c1) / (np.sqrt(v / c2) + config.adam_eps)
        params[name] = p - lr * wd * p - lr * update


def clip_grads(grads: dict, max_norm: float) -> float:
    """Scale gradients in place to global norm ``max_norm``; returns the pre-clip norm."""
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm > 0 and norm > max_norm:
        s = max_norm / norm
        for k in grads:
            grads[k] = grads[k] * s
    return norm


# ---------------------------------------------------------------------------
# data and evaluation


def make_batch(cfg: TrainConfig, stream: int, batch: int | None = None, corpus: ByteCorpus | None = None):
    batch = batch or cfg.batch
    if cfg.task == "copy":
        return gen_copy_task(cfg.seed, cfg.seq_len, cfg.vocab, cfg.delay, batch, stream)
    if cfg.task == "oscillatory_recall":
        return gen_oscillatory_recall(cfg.seed, cfg.seq_len, cfg.period, cfg.vocab, batch, stream)
    if corpus is None:
        corpus = ByteCorpus(cfg.corpus, cfg.seq_len)
    return corpus.batch(cfg.seed, batch, stream)


EVAL_STREAM = 2**40


def trainable_names(cfg: TrainConfig, params: ModelParams) -> set[str]:
    frozen = set()
    if not cfg.learn_omega:
        frozen.add("omega")
    if not cfg.learn_sigma:
        frozen.add("sigma_raw")
    if not cfg.learn_T:
        frozen.add("T_raw")
    return {k for k in params.arrays if k.rsplit(".", 1)[-1] not in frozen}


@dataclass
class EvalResult:
    loss: float
    accuracy: float
    s_eff: dict


def evaluate(params: ModelParams, cfg: TrainConfig, temperature: float, tokens=None, targets=None,
             mode: MaskMode = MaskMode.DETERMINISTIC_EVAL, corpus=None) -> EvalResult:
    """Held-out loss and token accuracy with noise-free masks."""
    if tokens is None:
        tokens, targets = make_batch(cfg, EVAL_STREAM, cfg.eval_batch, corpus)
    policy = MaskPolicy(mode, temperature=temperature, seed=0)
    rt = make_runtime(params, policy, trainable=())
    logits = lm_logits(rt, tokens)
    _, report = objective(rt, logits, targets, RegWeights(0.0, 0.0, 0.0))
    valid = targets != IGNORE
    acc = float(np.mean(np.argmax(logits.value, axis=-1)[valid] == targets[valid]))
    return EvalResult(report.task, acc, rt.trace.s_eff())


# ---------------------------------------------------------------------------
# loop


@dataclass
class TrainResult:
    params: ModelParams
    state: AdamState
    metrics_path: Path | None
    checkpoint_path: Path | None
    final_eval: EvalResult | None
    history: list = field(default_factory=list)
    steps_run: int = 0
    evals: list = field(default_factory=list)


def metrics_header(n_layers: int) -> list[str]:
    cols = ["step", "lr", "lambda_T", "task_loss", "reg_omega", "reg_sigma", "reg_mask", "total"]
    cols += [f"s_eff_layer_{i}" for i in range(n_layers)]
    return cols + ["grad_norm"]


def _fmt(x) -> str:
    return repr(float(x)) if not isinstance(x, int) else str(x)


def step_seed(seed: int, step: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(step)]).generate_state(1)[0])


def save_training_checkpoint(path, cfg: TrainConfig, params: ModelParams, state: AdamState, temperature: float):
    ckpt.save_checkpoint(
        path,
        params.arrays,
        {"train": cfg.to_dict(), "model": params.config.to_dict()},
        state.m,
        state.v,
        step=state.t,
        seed=cfg.seed,
        extra={"lambda_T": temperature},
    )


def load_training_checkpoint(path):
    """Return ``(TrainConfig, ModelParams, AdamState, lambda_T)``."""
    c = ckpt.load_checkpoint(path)
    train = c["config"].get("train")
    cfg = TrainConfig.from_dict({**train, "betas": tuple(train["betas"])}) if train else TrainConfig()
    params = ModelParams(ModelConfig.from_dict(c["config"]["model"]), c["params"])
    state = AdamState(c["adam_m"], c["adam_v"], c["step"])
    lam = float(c["state"].get("lambda_T", np.asarray(1.0)))
    return cfg, params, state, lam


def train_loop(cfg: TrainConfig, out_dir=None, params: ModelParams | None = None, callback=None) -> TrainResult:
    """Run ``cfg.steps`` optimisation steps; deterministic for a given config.

    When ``out_dir`` is given, writes ``metrics.csv``, ``checkpoint.bin`` and
    ``config.txt`` there.  A non-finite loss raises :class:`TrainingDiverged`
    and leaves the last good checkpoint on disk.
    """
    out = Path(out_dir) if out_dir is not None else None
    params = params or init_lm(cfg.model_config(), seed=cfg.seed)
    state = AdamState()
    trainable = trainable_names(cfg, params)
    corpus = ByteCorpus(cfg.corpus, cfg.seq_len) if cfg.task == "char_lm" else None
    total_steps = max(cfg.steps, 1)
    header = metrics_header(params.config.n_layers)
    ckpt_path = metrics_path = None
    writer = fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        write_config(cfg, out / "config.txt")
        ckpt_path = out / "checkpoint.bin"
        metrics_path = out / "metrics.csv"
        save_training_checkpoint(ckpt_path, cfg, params, state, cfg.anneal_start)
        fh = open(metrics_path, "w", newline="")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)

    history = []
    evals = []
    lam = cfg.anneal_start
    step = 0
    try:
        for step in range(1, cfg.steps + 1):
            lam = anneal_temperature(step - 1, total_steps, cfg.anneal_start, cfg.anneal_end, cfg.anneal_fraction)
            lr_t = lr_schedule(step, cfg.warmup_steps, cfg.lr)
            tokens, targets = make_batch(cfg, step, corpus=corpus)
            policy = MaskPolicy(MaskMode.STOCHASTIC, temperature=lam, seed=step_seed(cfg.seed, step))
            rt = make_runtime(params, policy, trainable=trainable)
            logits = lm_logits(rt, tokens)
            loss, report = objective(rt, logits, targets, cfg.reg)
            if not math.isfinite(report.total):
                raise TrainingDiverged(f"non-finite loss at step {step}")
            grads = rt.tape.backward(loss)
            gnorm = clip_grads(grads, cfg.clip_norm)
            adamw_step(params.arrays, grads, state, lr_t, cfg)

            s_eff = rt.trace.s_eff()
            row = [step, lr_t, lam, report.task, report.reg_omega, report.reg_sigma, report.reg_mask, report.total]
            row += [s_eff.get(f"layers.{i}", float(cfg.S_max)) for i in range(params.config.n_layers)]
            row.append(gnorm)
            history.append(row)
            if writer is not None and (step % cfg.log_every == 0 or step == cfg.steps):
                writer.writerow([_fmt(v) for v in row])
                fh.flush()
            if ckpt_path is not None and cfg.ckpt_every and step % cfg.ckpt_every == 0:
                save_training_checkpoint(ckpt_path, cfg, params, state, lam)
            if callback is not None and callback(step, params, report) is False:
                break
            if cfg.eval_every and step % cfg.eval_every == 0:
                ev = evaluate(params, cfg, lam, corpus=corpus)
                evals.append((step, ev))
                log.info("step %d eval_loss %.4f eval_accuracy %.4f", step, ev.loss, ev.accuracy)
                if cfg.stop_accuracy and ev.accuracy >= cfg.stop_accuracy:
                    if writer is not None and step % cfg.log_every and step != cfg.steps:
                        writer.writerow([_fmt(v) for v in row])
                    break
    finally:
        if fh is not None:
            fh.close()

    if ckpt_path is not None and cfg.steps > 0:
        save_training_checkpoint(ckpt_path, cfg, params, state, lam)
    final = evaluate(params, cfg, lam, corpus=corpus) if cfg.steps > 0 else None
    return TrainResult(params, state, metrics_path, ckpt_path, final, history, step, evals)


# ---------------------------------------------------------------------------
# reference experiments

COPY_BASE = TrainConfig(task="copy", steps=5000, batch=16, seq_len=32, vocab=8, delay=16, lr=3e-3, warmup_steps=100,
                        d=32, S_max=16, n_layers=2, log_every=100, eval_every=250, stop_accuracy=0.99)

OSCILLATORY_BASE = TrainConfig(task="oscillatory_recall", steps=1000, batch=16, seq_len=32, vocab=8, period=5,
                               d=16, d_ff=64, S_max=8, lr=3e-3, warmup_steps=100, log_every=100)

ABLATIONS = {
    # frozen omega stays at its zero initialisation
    "omega": (OSCILLATORY_BASE, {"learnable": ["learn_omega=true"], "frozen": ["learn_omega=false"]}),
    "mask_reg": (apply_overrides(OSCILLATORY_BASE, ["steps=600"]),
                 {"regularized": ["reg_mask=0.01"], "unregularized": ["reg_mask=0.0"]}),
}


@dataclass(frozen=True)
class AblationOutcome:
    seed: int
    variant: str
    eval_loss: float
    eval_accuracy: float
    s_eff: float  # summed over layers, noise-free masks at the final temperature


def run_ablation(base: TrainConfig, variants: dict, seeds=(0, 1, 2), out_dir=None) -> list[AblationOutcome]:
    """Train every variant (a list of overrides) once per seed and evaluate it on held-out data."""
    rows = []
    for seed in seeds:
        for name, overrides in variants.items():
            cfg = apply_overrides(base, [*overrides, f"seed={seed}"])
            target = None if out_dir is None else Path(out_dir) / f"{name}_seed{seed}"
            ev = train_loop(cfg, target).final_eval
            rows.append(AblationOutcome(seed, name, ev.loss, ev.accuracy, float(sum(ev.s_eff.values()))))
            log.info("seed %d %s loss %.4f S_eff %.3f", seed, name, ev.loss, rows[-1].s_eff)
    return rows


def paired(rows, a: str, b: str, key: str):
    """``[(seed, value_a, value_b)]`` for the two named variants."""
    by = {(r.seed, r.variant): getattr(r, key) for r in rows}
    return [(seed, by[seed, a], by[seed, b]) for seed in sorted({r.seed for r in rows})]


# ---------------------------------------------------------------------------
# whole-model gradient check


def tiny_model_config(S_max: int = 4, d: int = 8, vocab: int = 11, route: str = "streaming",
                      window: str = "exponential_only") -> ModelConfig:
    return ModelConfig(vocab=vocab, d=d, d_ff=2 * d, n_layers=2, S_max=S_max, T_init=4.5, route=route, window=window)


def model_objective(seed: int = 0, N: int = 8, batch: int = 2, config: ModelConfig | None = None,
                    weights: RegWeights | None = None, temperature: float = 0.7):
    """Full training objective of a random tiny model, as ``(loss_fn, params, analytic)``.

    The Gumbel noise is drawn once from ``seed`` and reused by every
    evaluation, so the masks are a deterministic function of the gate
    parameters.  ``analytic`` holds the tape gradients at ``params``.
    """
    cfg = config or tiny_model_config()
    weights = weights or RegWeights(1e-2, 1e-2, 1e-2)
    params = init_lm(cfg, seed=seed)
    rng = np.random.default_rng([seed, 7])
    for k, v in params.arrays.items():
        if k.endswith("omega"):
            params.arrays[k] = rng.uniform(0.1, 3.0, size=v.shape)
        elif k.endswith(("ln1_g", "ln2_g", "ln_f.g")):
            params.arrays[k] = 1.0 + 0.1 * rng.normal(size=v.shape)
        elif k.endswith(("ln1_b", "ln2_b", "ln_f.b")):
            params.arrays[k] = 0.1 * rng.normal(size=v.shape)
        elif k.endswith("b_alpha"):
            params.arrays[k] = rng.normal(size=v.shape)
        elif k.endswith("sigma_raw"):
            params.arrays[k] = rng.uniform(-2.0, 0.5, size=v.shape)
    tokens = rng.integers(0, cfg.vocab, size=(batch, N))
    targets = np.roll(tokens, 1, axis=1)
    targets[:, 0] = IGNORE
    policy = MaskPolicy(MaskMode.STOCHASTIC, temperature=temperature, seed=seed)

    def run(arrays, need_grad):
        rt = make_runtime(ModelParams(cfg, arrays), policy, trainable=None if need_grad else ())
        loss, _ = objective(rt, lm_logits(rt, tokens), targets, weights)
        return loss, rt

    loss, rt = run(params.arrays, True)
    analytic = rt.tape.backward(loss)
    return lambda a: float(run(a, False)[0].value), params.arrays, analytic


def model_gradcheck(seed: int = 0, N: int = 8, batch: int = 2, config: ModelConfig | None = None,
                    weights: RegWeights | None = None, temperature: float = 0.7):
    """Analytic vs central-difference gradients of :func:`model_objective`."""
    from .grad import gradcheck

    return gradcheck(*model_objective(seed, N, batch, config, weights, temperature))
