import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stlt.checkpoint import load_checkpoint
from stlt.core import EPS_SIGMA, T_MIN, softplus
from stlt.grad import NonFiniteGradientError
from stlt.tasks import IGNORE, ByteCorpus, dataset_hash, gen_copy_task, gen_oscillatory_recall
from stlt.train import (
    AdamState,
    TrainConfig,
    TrainingDiverged,
    adamw_step,
    apply_overrides,
    clip_grads,
    load_training_checkpoint,
    lr_schedule,
    metrics_header,
    read_config,
    train_loop,
    trainable_names,
    write_config,
)
from stlt.mixer import init_lm

SMALL = dict(task="copy", steps=6, batch=2, seq_len=8, vocab=5, delay=2, d=8, d_ff=16, S_max=4,
             warmup_steps=2, log_every=2, eval_batch=4)


def small(**kw):
    return TrainConfig(**{**SMALL, **kw})


# ---------------------------------------------------------------------------
# optimizer


def test_adamw_zero_gradient_no_decay_is_identity():
    p = {"w": np.array([1.0, -2.0])}
    adamw_step(p, {"w": np.zeros(2)}, AdamState(), 0.1, TrainConfig(weight_decay=0.0))
    np.testing.assert_array_equal(p["w"], [1.0, -2.0])


def test_adamw_first_step_is_minus_lr():
    p = {"w": np.array(0.0)}
    adamw_step(p, {"w": np.array(1.0)}, AdamState(), 0.1, TrainConfig(weight_decay=0.0))
    assert p["w"] == pytest.approx(-0.1, rel=1e-6)


def test_adamw_decoupled_decay():
    p = {"w": np.array([2.0])}
    adamw_step(p, {"w": np.zeros(1)}, AdamState(), 0.1, TrainConfig(weight_decay=0.1))
    assert p["w"][0] == pytest.approx(2.0 * (1 - 0.01), rel=1e-12)


def test_adamw_laplace_parameters_scaled_and_not_decayed():
    p = {"layers.0.sigma_raw": np.array([1.0]), "layers.0.W_v": np.array([1.0])}
    g = {k: np.ones(1) for k in p}
    adamw_step(p, g, AdamState(), 0.1, TrainConfig(weight_decay=0.5, param_lr_scale=0.1))
    assert p["layers.0.sigma_raw"][0] == pytest.approx(1.0 - 0.01, rel=1e-6)
    assert p["layers.0.W_v"][0] == pytest.approx(1.0 - 0.05 - 0.1, rel=1e-6)


def test_adamw_rejects_nonfinite():
    p = {"w": np.ones(2)}
    with pytest.raises(NonFiniteGradientError, match="w"):
        adamw_step(p, {"w": np.array([1.0, np.nan])}, AdamState(), 0.1, TrainConfig())
    np.testing.assert_array_equal(p["w"], np.ones(2))


def test_clip_grads_global_norm():
    g = {"a": np.array([3.0]), "b": np.array([4.0])}
    assert clip_grads(g, 1.0) == 5.0
    assert math.hypot(g["a"][0], g["b"][0]) == pytest.approx(1.0)
    g = {"a": np.array([0.3])}
    clip_grads(g, 1.0)
    assert g["a"][0] == 0.3


@pytest.mark.parametrize("step,expected", [(100, 1.0), (400, 0.5), (1, 0.01), (50, 0.5)])
def test_lr_schedule(step, expected):
    assert lr_schedule(step, 100, 1.0) == pytest.approx(expected)


def test_lr_schedule_requires_warmup():
    with pytest.raises(ValueError):
        lr_schedule(1, 0, 1.0)


@settings(max_examples=50)
@given(step=st.integers(1, 10**6), warmup=st.integers(1, 10**4))
def test_lr_schedule_bounded(step, warmup):
    assert 0 < lr_schedule(step, warmup, 3e-4) <= 3e-4


# ---------------------------------------------------------------------------
# config


def test_config_round_trip(tmp_path):
    cfg = small(lr=1e-3, betas=(0.8, 0.95), route="direct", adaptive=False)
    write_config(cfg, tmp_path / "c.txt")
    assert read_config(tmp_path / "c.txt") == cfg


def test_config_comments_and_unknown_keys(tmp_path):
    (tmp_path / "c.txt").write_text("# comment\nsteps=7  # trailing\n\nadaptive=false\n")
    cfg = read_config(tmp_path / "c.txt")
    assert cfg.steps == 7 and cfg.adaptive is False
    (tmp_path / "bad.txt").write_text("stepz=7\n")
    with pytest.raises(KeyError):
        read_config(tmp_path / "bad.txt")
    with pytest.raises(KeyError):
        apply_overrides(TrainConfig(), ["nope=1"])
    with pytest.raises(ValueError):
        apply_overrides(TrainConfig(), ["steps"])


def test_char_lm_uses_byte_vocabulary():
    assert TrainConfig(task="char_lm").model_config().vocab == 256


def test_freezing_omega_removes_it_from_training():
    cfg = small(learn_omega=False)
    params = init_lm(cfg.model_config(), seed=0)
    names = trainable_names(cfg, params)
    assert not any(n.endswith("omega") for n in names)
    assert all(np.all(v == 0) for k, v in params.arrays.items() if k.endswith("omega"))


# ---------------------------------------------------------------------------
# tasks


def test_copy_delay_zero_is_identity():
    tok, tgt = gen_copy_task(3, 10, 7, 0, batch=2)
    np.testing.assert_array_equal(tok, tgt)


def test_copy_maximal_delay():
    tok, tgt = gen_copy_task(3, 10, 7, 9)
    assert np.all(tgt[:, :9] == IGNORE)
    assert tgt[0, 9] == tok[0, 0]


def test_copy_rejects_delay_out_of_range():
    with pytest.raises(ValueError):
        gen_copy_task(0, 8, 4, 8)


def test_dataset_hashes_are_frozen():
    assert dataset_hash(*gen_copy_task(0, 32, 8, 16, 4)) == (
        "fbe25ae837206cb42fad8499580b5b8f39d3829469291f477d0eb3be46886580")
    assert dataset_hash(*gen_oscillatory_recall(0, 32, 5, 16, 4)) == (
        "25236d50af14a88901ce0ab0184680959ca5b67052a5fe444a86dd78e39e9210")


def test_streams_differ():
    a = gen_copy_task(0, 16, 8, 4, 2, stream=1)[0]
    b = gen_copy_task(0, 16, 8, 4, 2, stream=2)[0]
    assert not np.array_equal(a, b)


def test_period_two_is_predictable_from_current_token():
    tok, tgt = gen_oscillatory_recall(1, 12, 2, vocab=4, batch=8)
    for row_t, row_y in zip(tok, tgt):
        valid = row_y != IGNORE
        if row_t[0] != row_t[1]:
            mapping = {int(a): int(b) for a, b in zip(row_t[valid], row_y[valid])}
            assert all(mapping[int(a)] == int(b) for a, b in zip(row_t[valid], row_y[valid]))
            assert mapping[int(row_t[0])] == int(row_t[1])


@settings(max_examples=30)
@given(seed=st.integers(0, 1000), period=st.integers(2, 9))
def test_oscillatory_stream_is_periodic(seed, period):
    tok, tgt = gen_oscillatory_recall(seed, 24, period, batch=2)
    np.testing.assert_array_equal(tok[:, period:], tok[:, :-period])
    lag = period - 1
    np.testing.assert_array_equal(tgt[:, lag:], tok[:, :-lag])


def test_oscillatory_rejects_bad_period():
    with pytest.raises(ValueError):
        gen_oscillatory_recall(0, 8, 9)
    with pytest.raises(ValueError):
        gen_oscillatory_recall(0, 8, 1)


def test_byte_corpus(tmp_path):
    path = tmp_path / "c.txt"
    path.write_text("hello world, " * 20)
    corpus = ByteCorpus(path, 16)
    x, y = corpus.batch(0, 3)
    assert x.shape == (3, 16) and y.shape == (3, 16)
    np.testing.assert_array_equal(x[:, 1:], y[:, :-1])
    (tmp_path / "short.txt").write_text("hi")
    with pytest.raises(ValueError):
        ByteCorpus(tmp_path / "short.txt", 16)


# ---------------------------------------------------------------------------
# training loop


def test_zero_steps_writes_initial_checkpoint_only(tmp_path):
    res = train_loop(small(steps=0), tmp_path)
    assert res.final_eval is None
    assert (tmp_path / "checkpoint.bin").exists()
    assert (tmp_path / "metrics.csv").read_text().strip() == ",".join(metrics_header(2))
    assert load_checkpoint(tmp_path / "checkpoint.bin")["step"] == 0


def test_metrics_are_bit_identical(tmp_path):
    train_loop(small(), tmp_path / "a")
    train_loop(small(), tmp_path / "b")
    a = (tmp_path / "a" / "metrics.csv").read_bytes()
    assert a == (tmp_path / "b" / "metrics.csv").read_bytes()
    lines = a.decode().splitlines()
    assert lines[0].split(",") == metrics_header(2)
    assert [ln.split(",")[0] for ln in lines[1:]] == ["2", "4", "6"]


def test_seed_changes_metrics(tmp_path):
    train_loop(small(), tmp_path / "a")
    train_loop(small(seed=1), tmp_path / "b")
    assert (tmp_path / "a" / "metrics.csv").read_bytes() != (tmp_path / "b" / "metrics.csv").read_bytes()


def test_checkpoint_resumes_state(tmp_path):
    res = train_loop(small(), tmp_path)
    cfg, params, state, lam = load_training_checkpoint(tmp_path / "checkpoint.bin")
    assert cfg == small()
    assert state.t == 6
    assert lam == pytest.approx(res.history[-1][2])
    for k, v in res.params.arrays.items():
        assert params.arrays[k].tobytes() == v.tobytes()
        assert state.m[k].tobytes() == res.state.m[k].tobytes()


def test_stability_floors_hold_during_training(tmp_path):
    sigmas, Ts = [], []

    def cb(step, params, report):
        for k, v in params.arrays.items():
            if k.endswith("sigma_raw"):
                sigmas.append(np.min(softplus(v) + EPS_SIGMA))
            if k.endswith("T_raw"):
                Ts.append(float(softplus(v) + T_MIN))

    # an aggressive learning rate drives the raw parameters far negative
    train_loop(small(lr=0.5, param_lr_scale=10.0, steps=5), callback=cb)
    assert len(sigmas) == len(Ts) == 10
    assert min(sigmas) >= EPS_SIGMA and min(Ts) >= T_MIN


def test_callback_can_stop(tmp_path):
    res = train_loop(small(steps=10), tmp_path, callback=lambda step, p, r: step < 3)
    assert res.steps_run == 3 and len(res.history) == 3
    assert load_checkpoint(tmp_path / "checkpoint.bin")["step"] == 3


def test_early_stop_on_accuracy():
    res = train_loop(small(steps=10, eval_every=2, stop_accuracy=1e-9))
    assert res.steps_run == 2 and len(res.evals) == 1


def test_divergence_keeps_last_good_checkpoint(tmp_path):
    def poison(step, params, report):
        if step == 4:
            for k in params.arrays:
                if k.endswith("W_o"):
                    params.arrays[k] = params.arrays[k] * np.nan

    with pytest.raises(TrainingDiverged, match="step 5"):
        train_loop(small(ckpt_every=2), tmp_path, callback=poison)
    _, params, state, _ = load_training_checkpoint(tmp_path / "checkpoint.bin")
    assert state.t == 4
    assert all(np.all(np.isfinite(v)) for v in params.arrays.values())


def test_copy_loss_starts_near_uniform():
    res = train_loop(small(steps=1))
    assert res.history[0][3] == pytest.approx(math.log(5), abs=0.3)


def test_char_lm_trains_on_a_text_file(tmp_path):
    corpus = tmp_path / "text.txt"
    corpus.write_text("the quick brown fox jumps over the lazy dog. " * 10)
    res = train_loop(small(task="char_lm", corpus=str(corpus), seq_len=16, steps=2), tmp_path / "run")
    assert res.params.config.vocab == 256
    assert math.isfinite(res.final_eval.loss)
