import json

import numpy as np
import pytest

from caflow import ccr
from caflow.data import DatasetSplit, SyntheticSpec, generate_synthetic
from caflow.errors import ConfigError, NumericError
from caflow.model import load_checkpoint
from caflow.trainer import (VARIANTS, AdamState, TrainConfig, ablate, adam_step, lr_schedule,
                            train, variant_config)


def tiny_split(seed=0, n_train=24, n_test=16, M=8, D=8):
    return generate_synthetic(SyntheticSpec(M=M, D=D, n_train=n_train, n_test=n_test, seed=seed))


def tiny_config(**kw):
    base = dict(M=8, D=8, width=16, heads=2, n_queries=2, batch=8, epochs=2, K=2)
    return TrainConfig(**{**base, **kw})


# -- config ---------------------------------------------------------------------

def test_defaults_follow_recipe():
    cfg = TrainConfig()
    assert (cfg.lr, cfg.weight_decay, cfg.batch, cfg.dropout) == (1e-2, 1e-4, 32, 0.3)
    assert (cfg.lambda1, cfg.lambda2, cfg.tau_start) == (0.02, 0.5, 1.0)


def test_from_mapping_coerces_and_rejects():
    cfg = TrainConfig.from_mapping({"lr": "0.001", "epochs": 3.0, "use_ccr": False})
    assert cfg.lr == 0.001 and cfg.epochs == 3 and cfg.use_ccr is False
    with pytest.raises(ConfigError, match="lrate"):
        TrainConfig.from_mapping({"lrate": 1})
    with pytest.raises(ConfigError, match="epochs"):
        TrainConfig.from_mapping({"epochs": 2.5})
    with pytest.raises(ConfigError, match="use_bit"):
        TrainConfig.from_mapping({"use_bit": "yes"})
    with pytest.raises(ConfigError):
        TrainConfig.from_mapping({"batch": 1})


def test_variant_flags():
    base = TrainConfig()
    flags = [(variant_config(base, c, b).ccr_enabled, variant_config(base, c, b).bit_enabled)
             for _, c, b in VARIANTS]
    assert flags == [(False, False), (True, False), (False, True), (True, True)]
    assert not TrainConfig(lambda1=0.0, lambda2=0.0).ccr_enabled


# -- optimiser --------------------------------------------------------------------

def test_zero_gradients_leave_params():
    p = {"w": np.array([1.0, -2.0])}
    adam_step(p, {"w": np.zeros(2)}, AdamState(), 0.1, 0.0)
    np.testing.assert_array_equal(p["w"], [1.0, -2.0])


def test_first_step_matches_hand_oracle():
    g = np.array([0.5, -3.0, 1e-3])
    p = {"w": np.array([1.0, 1.0, 1.0])}
    adam_step(p, {"w": g}, AdamState(), 0.01, 0.0)
    m_hat = (0.1 * g) / 0.1
    v_hat = (0.001 * g * g) / 0.001
    np.testing.assert_allclose(p["w"], 1.0 - 0.01 * m_hat / (np.sqrt(v_hat) + 1e-8), rtol=1e-14)


def test_two_steps_match_hand_oracle():
    g1, g2 = np.array([0.2, -1.0]), np.array([-0.4, 0.5])
    p, state = {"w": np.zeros(2)}, AdamState()
    adam_step(p, {"w": g1}, state, 0.1, 0.0)
    adam_step(p, {"w": g2}, state, 0.1, 0.0)
    m1, v1 = 0.1 * g1, 0.001 * g1 ** 2
    m2, v2 = 0.9 * m1 + 0.1 * g2, 0.999 * v1 + 0.001 * g2 ** 2
    step1 = (m1 / 0.1) / (np.sqrt(v1 / 0.001) + 1e-8)
    step2 = (m2 / (1 - 0.81)) / (np.sqrt(v2 / (1 - 0.999 ** 2)) + 1e-8)
    np.testing.assert_allclose(p["w"], -0.1 * (step1 + step2), rtol=1e-13)


def test_decoupled_decay_shrinks():
    p = {"w": np.array([2.0, -4.0])}
    adam_step(p, {"w": np.zeros(2)}, AdamState(), 0.01, 1e-4)
    np.testing.assert_allclose(p["w"], np.array([2.0, -4.0]) * (1 - 1e-6), rtol=1e-15)


def test_nan_gradient_names_parameter():
    with pytest.raises(NumericError, match="encoder.w"):
        adam_step({"encoder.w": np.ones(2)}, {"encoder.w": np.array([np.nan, 0.0])}, AdamState(), 0.1, 0.0)


# -- schedules --------------------------------------------------------------------

def test_lr_schedule_points():
    assert [lr_schedule(e, 100) for e in (0, 49, 50, 75, 76, 90)] == [1.0, 1.0, 0.1, 0.1, 0.01, 0.01]


def test_lr_and_tau_sequences_are_non_increasing():
    lrs = [lr_schedule(e, 37) for e in range(37)]
    taus = [ccr.temperature(e, 37) for e in range(37)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))
    assert taus[0] == 1.0 and all(a >= b for a, b in zip(taus, taus[1:]))


# -- training ----------------------------------------------------------------------

def test_zero_epochs_logs_initial_eval_only():
    res = train(tiny_config(epochs=0), tiny_split())
    assert res.log.epochs == [] and res.log.initial_eval["n"] == 16
    assert res.log.best_epoch == -1


def test_empty_split_is_rejected():
    split = tiny_split()
    with pytest.raises(ConfigError, match="empty"):
        train(tiny_config(), DatasetSplit([], split.test, split.s_min, split.s_max))
    with pytest.raises(ConfigError, match="expects"):
        train(tiny_config(M=6), split)


def test_runs_are_byte_identical(tmp_path):
    split = tiny_split()
    cfg = tiny_config(epochs=2)
    train(cfg, split, tmp_path / "a")
    train(cfg, split, tmp_path / "b")
    for name in ("run_log.json", "checkpoint.ckpt", "eval.csv", "predictions.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name


def test_log_records_schedule_and_config(tmp_path):
    cfg = tiny_config(epochs=4)
    res = train(cfg, tiny_split(), tmp_path)
    log = json.loads((tmp_path / "run_log.json").read_text())
    assert log["config"]["lr"] == cfg.lr and log["config"]["lambda2"] == cfg.lambda2
    assert [e["lr"] for e in log["epochs"]] == [cfg.lr * lr_schedule(e, 4) for e in range(4)]
    assert [e["tau"] for e in log["epochs"]] == [ccr.temperature(e, 4) for e in range(4)]
    for e in log["epochs"]:
        parts = e["loss"]
        assert set(parts) == {"regression", "ccr", "bit", "total", "lambda1", "lambda2"}
    assert res.log.checkpoint == "checkpoint.ckpt"


def test_checkpoint_reproduces_predictions(tmp_path):
    split = tiny_split()
    res = train(tiny_config(epochs=2), split, tmp_path)
    model, meta = load_checkpoint(tmp_path / "checkpoint.ckpt")
    X, _ = split.arrays("test")
    pred = model.predict(X.astype(model.dtype), split.s_min, split.s_max)
    assert pred.tobytes() == res.predictions.tobytes()
    assert meta["extra"] == {"s_min": 0.0, "s_max": 25.0}


def test_regression_loss_descends():
    split = tiny_split(n_train=64, n_test=32)
    res = train(tiny_config(epochs=30, lr=3e-3, batch=16), split)
    losses = [e["loss"]["regression"] for e in res.log.epochs]
    assert losses[-1] < losses[0]


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_loss_aborts():
    split = tiny_split()
    for seq in split.train:
        seq.clips[:] = 1e30
    with pytest.raises(NumericError):
        train(tiny_config(), split)


# -- ablation ----------------------------------------------------------------------

def test_ablation_shape_and_shared_start(tmp_path):
    split = tiny_split()
    reports, text, results = ablate(tiny_config(epochs=1), split, tmp_path)
    lines = text.splitlines()
    assert lines[0] == "variant,ccr,bit,srcc,r_l2,n"
    assert [line.split(",")[0] for line in lines[1:]] == [v[0] for v in VARIANTS]
    initial = {json.dumps(r.log.initial_eval, sort_keys=True) for r in results.values()}
    assert len(initial) == 1
    assert (tmp_path / "ablation.csv").read_text() == text
    assert (tmp_path / "plus_CCR" / "run_log.json").exists()


def test_zero_weight_variant_equals_baseline():
    split = tiny_split()
    base = train(variant_config(tiny_config(), False, False), split)
    zero = train(tiny_config(lambda1=0.0, lambda2=0.0), split)
    assert base.log.epochs == zero.log.epochs
