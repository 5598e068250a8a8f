"""End-to-end acceptance checks, one test per criterion.

Each test records a ``[PASS]``/``[FAIL]`` line (shown in the terminal
summary) and then asserts it.  The copy-task model is trained once per
session and shared by the learnability and perturbation checks.
"""

import math
import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from stlt.adaptive import MaskMode, MaskPolicy
from stlt.analysis import exponential_envelope_signal, param_dump_rows, quadrature_sweep, relevance_perturbation
from stlt.analysis import window_cutoff_experiment
from stlt.bench import bench_scaling, scaling_slope
from stlt.checkpoint import load_checkpoint, save_checkpoint
from stlt.core import LaplaceNodeBank, Mode, WindowSpec, inv_softplus, stlt_direct, stlt_streaming
from stlt.losses import RegWeights, regularization
from stlt.mixer import ModelConfig, forward_lm, init_lm, mix_weights, causal_block, BlockParams
from stlt.train import (
    ABLATIONS,
    COPY_BASE,
    TrainConfig,
    make_batch,
    model_gradcheck,
    paired,
    run_ablation,
    train_loop,
)

pytestmark = pytest.mark.slow


# 1 --------------------------------------------------------------------------


def test_01_streaming_matches_direct(verdict):
    rng = np.random.default_rng(20240601)
    t0 = time.perf_counter()
    worst = 0.0
    for i in range(200):
        N, S, d = int(rng.integers(1, 513)), int(rng.integers(1, 33)), int(rng.integers(1, 9))
        sigma = np.exp(rng.uniform(np.log(1e-3), np.log(10.0), S))
        bank = LaplaceNodeBank(inv_softplus(sigma - 1e-4), rng.uniform(-np.pi, np.pi, S), T_raw=1.0)
        x = rng.normal(size=(N, d))
        mode = Mode.UNILATERAL if i % 2 else Mode.BILATERAL
        ref = stlt_direct(x, bank, WindowSpec("exponential_only"), mode)
        got = stlt_streaming(x, bank, mode)
        worst = max(worst, float(np.max(np.abs(got - ref)) / max(np.max(np.abs(ref)), 1e-300)))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-8 and elapsed < 60
    assert verdict("01 streaming = direct", ok, f"max rel err {worst:.2e} over 200 instances in {elapsed:.1f}s")


# 2 --------------------------------------------------------------------------


def test_02_model_gradients(verdict):
    t0 = time.perf_counter()
    worst = max(model_gradcheck(seed, N=8).worst for seed in range(50))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-4 and elapsed < 300
    assert verdict("02 full-model gradcheck", ok, f"max rel err {worst:.2e} over 50 models in {elapsed:.0f}s")


# 3 --------------------------------------------------------------------------


def test_03_scaling_exponents(verdict):
    stream = scaling_slope(bench_scaling([1024, 2048, 4096, 8192, 16384], 16, 8, "stlt_streaming", repeats=7))
    naive = scaling_slope(bench_scaling([256, 512, 1024, 2048], 16, 8, "naive_attention", repeats=7))
    ok = 0.8 <= stream <= 1.3 and 1.7 <= naive <= 2.3
    assert verdict("03 scaling exponents", ok, f"streaming slope {stream:.3f}, naive slope {naive:.3f}")


# 4 --------------------------------------------------------------------------


def test_04_quadrature_order(verdict):
    t0 = time.perf_counter()
    _, p = quadrature_sweep("decaying_sine", S_values=(16, 32, 64, 128, 256, 512, 1024))
    elapsed = time.perf_counter() - t0
    assert verdict("04 trapezoid order", 1.7 <= p <= 2.3 and elapsed < 60, f"p = {p:.3f} ({elapsed:.1f}s)")


# 5 --------------------------------------------------------------------------


def test_05_window_cutoff_law(verdict):
    x = exponential_envelope_signal(400, d=2, seed=5)
    T = np.arange(10, 81, 10)
    slopes = {s: window_cutoff_experiment(x, T, s).slope for s in (0.05, 0.1)}
    ok = all(abs(slope + s) <= 0.3 * s for s, slope in slopes.items())
    detail = ", ".join(f"sigma_min {s}: slope {v:.4f}" for s, v in slopes.items())
    assert verdict("05 window cutoff slope", ok, detail)


# 6 and 8 --------------------------------------------------------------------


@pytest.fixture(scope="module")
def copy_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("copy")
    t0 = time.perf_counter()
    res = train_loop(COPY_BASE, out)
    return res, time.perf_counter() - t0


def test_06_copy_task(copy_run, verdict):
    res, elapsed = copy_run
    acc = res.final_eval.accuracy
    early = [row[3] for row in res.history[: COPY_BASE.steps // 10]]
    below_uniform = min(early) < math.log(COPY_BASE.vocab)
    longest = max(r["t_half"] for r in param_dump_rows(res.params))
    ok = acc >= 0.99 and res.steps_run <= 20000 and elapsed < 1800
    detail = (f"accuracy {acc:.4f} after {res.steps_run} steps in {elapsed:.0f}s; "
              f"loss below ln(vocab) in first 10%: {below_uniform}; longest half-life {longest:.1f}")
    assert verdict("06 copy task", ok, detail)
    assert below_uniform and longest >= 16


def test_08_perturbation_linearity(copy_run, verdict):
    res, _ = copy_run
    cfg = COPY_BASE
    tokens, targets = make_batch(cfg, 2**41, 64)
    lam = res.history[-1][2]
    rows = relevance_perturbation(res.params, tokens, targets, (1e-3, 1e-2),
                                  MaskPolicy(MaskMode.DETERMINISTIC_EVAL, temperature=lam))
    r1, r2 = rows[0].ratio, rows[1].ratio
    ok = r1 > 0 and r2 > 0 and 1 / 3 <= r1 / r2 <= 3
    assert verdict("08 perturbation linearity", ok, f"dloss/|dR| = {r1:.4g} (eps 1e-3), {r2:.4g} (eps 1e-2)")


# 7 --------------------------------------------------------------------------


def test_07a_learnable_omega(verdict):
    base, variants = ABLATIONS["omega"]
    pairs = paired(run_ablation(base, variants), "learnable", "frozen", "eval_loss")
    wins = sum(a < b for _, a, b in pairs)
    detail = "; ".join(f"seed {s}: {a:.3f} vs {b:.3f}" for s, a, b in pairs)
    assert verdict("07a learnable vs frozen omega", wins == 3, f"{wins}/3 ({detail})")


def test_07b_mask_regularization(verdict):
    base, variants = ABLATIONS["mask_reg"]
    pairs = paired(run_ablation(base, variants), "regularized", "unregularized", "s_eff")
    wins = sum(a < b for _, a, b in pairs)
    detail = "; ".join(f"seed {s}: S_eff {a:.3f} vs {b:.3f}" for s, a, b in pairs)
    assert verdict("07b mask regularization", wins == 3, f"{wins}/3 ({detail})")


# 9 --------------------------------------------------------------------------


def test_09_determinism_and_persistence(tmp_path, verdict):
    cfg = TrainConfig(task="copy", steps=20, batch=4, seq_len=16, vocab=6, delay=4, d=8, d_ff=16, S_max=4,
                      warmup_steps=5, log_every=5, ckpt_every=10)
    a = train_loop(cfg, tmp_path / "a")
    train_loop(cfg, tmp_path / "b")
    same_metrics = (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()

    first = load_checkpoint(tmp_path / "a" / "checkpoint.bin")
    save_checkpoint(tmp_path / "again.bin", first["params"], first["config"], first["adam_m"], first["adam_v"],
                    first["step"], first["seed"], first["state"])
    second = load_checkpoint(tmp_path / "again.bin")
    same_bytes = (tmp_path / "again.bin").read_bytes() == (tmp_path / "a" / "checkpoint.bin").read_bytes()
    same_params = all(second["params"][k].tobytes() == v.tobytes() for k, v in a.params.arrays.items())
    ok = same_metrics and same_bytes and same_params
    detail = f"metrics identical: {same_metrics}; checkpoint bytes identical: {same_bytes}; params bitwise: {same_params}"
    assert verdict("09 determinism and persistence", ok, detail)


# 10 -------------------------------------------------------------------------


def test_10_invariant_suites(verdict):
    counts = dict(causality=0, mask_zero=0, softmax=0, regularizer=0)
    config = settings(max_examples=300, derandomize=True, database=None)

    lm = init_lm(ModelConfig(vocab=6, d=8, d_ff=16, S_max=4), seed=0)

    @settings(config, max_examples=250)
    @given(seed=st.integers(0, 2**32 - 1), n=st.integers(0, 11), mode=st.sampled_from(list(MaskMode)))
    def causality(seed, n, mode):
        counts["causality"] += 1
        rng = np.random.default_rng(seed)
        tok = rng.integers(0, 6, (2, 12))
        tok2 = tok.copy()
        tok2[:, n] = (tok2[:, n] + 1 + rng.integers(0, 5)) % 6
        pol = MaskPolicy(mode, temperature=0.5, seed=seed)
        np.testing.assert_array_equal(forward_lm(tok, lm, pol)[:, :n], forward_lm(tok2, lm, pol)[:, :n])

    block_cfg = ModelConfig(vocab=4, d=6, d_ff=12, S_max=4)

    @settings(config, max_examples=250)
    @given(seed=st.integers(0, 2**32 - 1), k=st.integers(0, 3))
    def mask_zero(seed, k):
        counts["mask_zero"] += 1
        rng = np.random.default_rng(seed)
        p = BlockParams.init(block_cfg, rng, ffn=True, pooling="first")
        x = rng.normal(size=(7, 6))
        m = rng.uniform(0.1, 1.0, 4)
        m[k] = 0.0
        before = causal_block(x, p, mask=m)
        p.bank.sigma_raw[k] = rng.normal() * 4
        p.bank.omega[k] = rng.normal() * 4
        np.testing.assert_allclose(causal_block(x, p, mask=m), before, rtol=0, atol=1e-12)

    @settings(config, max_examples=300)
    @given(N=st.integers(1, 40), scale=st.floats(0.0, 1e6), causal=st.booleans(), seed=st.integers(0, 2**32 - 1))
    def softmax(N, scale, causal, seed):
        counts["softmax"] += 1
        A = mix_weights(scale * np.random.default_rng(seed).normal(size=(N, N)), S=8, causal=causal)
        np.testing.assert_allclose(A.sum(-1), 1.0, rtol=0, atol=1e-12)
        assert np.all(A >= 0)
        if causal:
            assert np.all(A[np.triu_indices(N, 1)] == 0.0)

    @settings(config, max_examples=300)
    @given(arrays(np.float64, st.integers(1, 16), elements=st.floats(1e-3, 50.0)), st.data())
    def regularizer(sigma, data):
        counts["regularizer"] += 1
        S = sigma.size
        omega = data.draw(arrays(np.float64, S, elements=st.floats(-10, 10)))
        m = data.draw(arrays(np.float64, S, elements=st.floats(0, 1)))
        w = RegWeights(*data.draw(st.tuples(*[st.floats(0, 100)] * 3)))
        bank = LaplaceNodeBank(inv_softplus(np.maximum(sigma - 1e-4, 1e-12)), omega, T_raw=1.0)
        assert all(r >= 0 for r in regularization(bank, m, w))

    failures = []
    for fn in (causality, mask_zero, softmax, regularizer):
        try:
            fn()
        except Exception as exc:  # noqa: BLE001 - report every suite, then fail
            failures.append(f"{fn.__name__}: {type(exc).__name__}")
    total = sum(counts.values())
    ok = not failures and total >= 1000
    detail = f"{total} cases ({', '.join(f'{k} {v}' for k, v in counts.items())})"
    if failures:
        detail += "; failed: " + ", ".join(failures)
    assert verdict("10 invariant property suites", ok, detail)
