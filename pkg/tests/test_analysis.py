import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad

from stlt.adaptive import MaskMode, MaskPolicy
from stlt.analysis import (
    DUMP_COLUMNS,
    CutoffCurve,
    ErrorBoundReport,
    SummaryTable,
    bromwich_trapezoid,
    dump_params,
    exponential_envelope_signal,
    fit_loglog_slope,
    laplace_inversion_experiment,
    make_signal,
    operator_norm,
    param_dump_rows,
    quadrature_sweep,
    relevance_perturbation,
    rows_to_csv,
    truncation_sweep,
    window_cutoff_error,
    window_cutoff_experiment,
)
from stlt.checkpoint import CorruptCheckpointError
from stlt.core import Mode
from stlt.mixer import init_lm
from stlt.tasks import gen_copy_task
from stlt.train import TrainConfig, save_training_checkpoint, AdamState, tiny_model_config

# ---------------------------------------------------------------------------
# inversion


@pytest.mark.parametrize("kind", ["decaying_sine", "gaussian_pulse", "step"])
def test_closed_form_transforms(kind):
    sig = make_signal(kind)
    for s in (0.7, 1.5 + 2j):
        re = quad(lambda t: (sig.f(t) * np.exp(-s * t)).real, 0, 60, limit=400)[0]
        im = quad(lambda t: (sig.f(t) * np.exp(-s * t)).imag, 0, 60, limit=400)[0]
        assert complex(sig.F(np.array([s]))[0]) == pytest.approx(complex(re, im), rel=1e-7, abs=1e-9)


def test_decaying_sine_error_vanishes_with_resolution():
    coarse = laplace_inversion_experiment("decaying_sine", S=64, B=5)
    fine = laplace_inversion_experiment("decaying_sine", S=4096, B=80)
    assert fine.E_total < coarse.E_total / 50
    assert fine.E_total < 2e-3


def test_bromwich_validates_inputs():
    F = make_signal("step").F
    with pytest.raises(ValueError):
        bromwich_trapezoid(F, [1.0], 1, 4.0, 0.5)
    with pytest.raises(ValueError):
        bromwich_trapezoid(F, [1.0], 8, 4.0, 0.0)


@pytest.mark.parametrize("kind", ["decaying_sine", "gaussian_pulse"])
def test_trapezoid_order_near_two(kind):
    reps, p = quadrature_sweep(kind)
    assert 1.7 <= p <= 2.3
    assert all(r.p == p for r in reps)


def test_quadrature_error_non_increasing_in_S():
    reps, _ = quadrature_sweep("step")
    errs = [r.E_quad for r in reps]
    assert all(b <= a * 1.05 for a, b in zip(errs, errs[1:]))


@pytest.mark.parametrize("kind", ["decaying_sine", "gaussian_pulse", "step"])
def test_truncation_error_non_increasing_in_B(kind):
    errs = [r.E_trunc for r in truncation_sweep(kind, B_values=(2.0, 4.0, 8.0, 16.0, 32.0))]
    assert all(b <= a * 1.05 for a, b in zip(errs, errs[1:]))


def test_truncation_decay_rate_follows_transform_tail():
    # a smooth pulse has a rapidly decaying transform until the small jump at t=0 takes over;
    # a rational transform decays only algebraically, so doubling B buys a bounded factor
    gauss = [r.E_trunc for r in truncation_sweep("gaussian_pulse", B_values=(2.0, 4.0, 8.0))]
    assert gauss[2] < gauss[0] * 1e-3
    sine = [r.E_trunc for r in truncation_sweep("decaying_sine", B_values=(4.0, 8.0, 16.0, 32.0))]
    slope = fit_loglog_slope([4, 8, 16, 32], sine)
    assert -3.0 < slope < -1.0


def test_report_bound_and_row():
    r = laplace_inversion_experiment("gaussian_pulse", S=33, B=6)
    assert r.E_win == 0.0 and math.isinf(r.T)
    assert min(r.E_trunc, r.E_quad, r.E_total) >= 0
    assert r.bound_holds
    assert set(r.to_row()) >= {"E_trunc", "E_quad", "E_win", "E_total", "p"}
    with pytest.raises(ValueError):
        laplace_inversion_experiment(quad="simpson")


@settings(max_examples=20)
@given(S=st.integers(8, 200), B=st.floats(1.0, 20.0))
def test_total_within_sum_of_parts(S, B):
    r = laplace_inversion_experiment("decaying_sine", S=S, B=B)
    assert r.bound_holds


def test_fit_loglog_slope_exact():
    x = np.array([1.0, 2.0, 4.0, 8.0])
    assert fit_loglog_slope(x, 3 * x**-2) == pytest.approx(-2.0)


# ---------------------------------------------------------------------------
# window cutoff


def test_window_covering_everything_is_exact():
    x = exponential_envelope_signal(40, d=2)
    s = np.array([0.01 + 0.3j, 0.2 + 0j])
    assert window_cutoff_error(x, s, 40.0) == 0.0
    assert window_cutoff_error(x, s, 45.0, Mode.BILATERAL) == 0.0


def test_cutoff_error_monotone_in_T():
    x = exponential_envelope_signal(200)
    curve = window_cutoff_experiment(x, [5, 10, 20, 40, 80, 160], sigma_min=0.05)
    assert np.all(np.diff(curve.error) <= 0)
    assert curve.rows()[0] == {"T": 5.0, "error": float(curve.error[0])}


@pytest.mark.parametrize("sigma_min", [0.05, 0.1])
def test_cutoff_slope_tracks_slowest_decay(sigma_min):
    x = exponential_envelope_signal(400)
    curve = window_cutoff_experiment(x, np.arange(10, 81, 10), sigma_min)
    assert curve.slope == pytest.approx(-sigma_min, rel=0.3)


def test_doubling_sigma_min_doubles_slope():
    x = exponential_envelope_signal(400)
    T = np.arange(10, 81, 10)
    a = window_cutoff_experiment(x, T, 0.04).slope
    b = window_cutoff_experiment(x, T, 0.08).slope
    assert b / a == pytest.approx(2.0, rel=0.15)


def test_cutoff_curve_without_positive_errors():
    c = window_cutoff_experiment(exponential_envelope_signal(10), [20, 30], 0.1)
    assert isinstance(c, CutoffCurve) and math.isnan(c.slope)


# ---------------------------------------------------------------------------
# relevance perturbation


def test_operator_norm_matches_svd():
    M = np.random.default_rng(0).normal(size=(7, 5))
    assert operator_norm(M, iters=200, tol=1e-12) == pytest.approx(np.linalg.svd(M, compute_uv=False)[0], rel=1e-6)
    assert operator_norm(np.zeros((3, 3))) == 0.0
    batch = np.stack([M, 3 * M])
    assert operator_norm(batch, iters=200, tol=1e-12) == pytest.approx(3 * np.linalg.svd(M, compute_uv=False)[0],
                                                                         rel=1e-6)


def small_model(seed=0):
    cfg = tiny_model_config(S_max=4, d=8, vocab=6)
    return init_lm(cfg, seed=seed), gen_copy_task(seed, 10, 6, 2, batch=4)


def test_zero_perturbation_changes_nothing():
    params, (tok, tgt) = small_model()
    (row,) = relevance_perturbation(params, tok, tgt, (0.0,))
    assert row.delta_loss == 0.0 and row.norm_dR == 0.0 and row.ratio == 0.0


def test_perturbation_is_first_order():
    params, (tok, tgt) = small_model(1)
    rows = relevance_perturbation(params, tok, tgt, (1e-3, 1e-2))
    assert [r.norm_dR for r in rows] == pytest.approx([1e-3, 1e-2], rel=1e-3)
    assert all(r.delta_loss > 0 for r in rows)
    assert 1 / 3 <= rows[0].ratio / rows[1].ratio <= 3


def test_perturbation_respects_policy():
    params, (tok, tgt) = small_model(2)
    a = relevance_perturbation(params, tok, tgt, (1e-2,), MaskPolicy(MaskMode.DETERMINISTIC_EVAL, temperature=0.5))
    b = relevance_perturbation(params, tok, tgt, (1e-2,), MaskPolicy(MaskMode.DETERMINISTIC_EVAL, temperature=0.5))
    assert a == b


# ---------------------------------------------------------------------------
# parameter dumps


def test_fresh_dump_spans_init_range():
    params = init_lm(TrainConfig(d=8, d_ff=16, S_max=6).model_config(), seed=0)
    rows = param_dump_rows(params)
    for layer in {r["layer"] for r in rows}:
        sig = [r["sigma"] for r in rows if r["layer"] == layer]
        assert min(sig) == pytest.approx(1e-3, rel=1e-9)
        assert max(sig) == pytest.approx(10.0, rel=1e-9)
        assert sig == sorted(sig)
    for r in rows:
        assert r["t_half"] == pytest.approx(math.log(2) / r["sigma"], rel=1e-12)


def test_dump_is_byte_stable(tmp_path):
    cfg = TrainConfig(d=8, d_ff=16, S_max=4)
    params = init_lm(cfg.model_config(), seed=3)
    path = tmp_path / "c.bin"
    save_training_checkpoint(path, cfg, params, AdamState(), 0.4)
    a = dump_params(path, tmp_path / "a.csv")
    b = dump_params(path)
    assert a == b == (tmp_path / "a.csv").read_text()
    lines = a.splitlines()
    assert lines[0].split(",") == DUMP_COLUMNS
    assert len(lines) == 1 + 2 * 4


def test_dump_rejects_corrupt_checkpoint(tmp_path):
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"STLTCKPT\x01\x00\x00\x00\x05")
    with pytest.raises(CorruptCheckpointError):
        dump_params(bad)
    bad.write_bytes(b"garbage!" * 4)
    with pytest.raises(CorruptCheckpointError):
        dump_params(bad)


def test_ungated_bank_reports_ones():
    params = init_lm(TrainConfig(d=8, d_ff=16, S_max=4, adaptive=False).model_config(), seed=0)
    rows = param_dump_rows(params)
    assert all(r["alpha"] == 1.0 and r["m_tilde"] == 1.0 and r["s_eff"] == 4.0 for r in rows)


def test_report_helpers(tmp_path):
    text = rows_to_csv([{"a": 1, "b": 0.1}], tmp_path / "r.csv")
    assert text == "a,b\n1,0.1\n" == (tmp_path / "r.csv").read_text()
    rep = ErrorBoundReport("x", 4, 1.0, 0.5, 1.0, 0.5, 0.1, 0.2, 0.0, 0.25)
    assert "E_quad" in rows_to_csv([rep])
    table = SummaryTable("title", ["S", "err"], [[16, 0.5], [32, 0.125]]).render()
    assert table.splitlines()[0] == "title" and "0.125" in table
