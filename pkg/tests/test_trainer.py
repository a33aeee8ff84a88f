import math

import numpy as np
import pytest

from regflow import autodiff as ad
from regflow.data import Dataset, GroundTruth, ToyConfig, gen_toy
from regflow.flow import FlowConfig
from regflow.hypernet import HyperNetwork
from regflow.mdn import MdnModel
from regflow.trainer import (
    AdamState,
    NonFiniteLossError,
    TrainConfig,
    TrainingAborted,
    adam_step,
    evaluate,
    heldout_nll,
    nll_loss,
    smoothed,
    train,
    write_report,
)

LOG_2PI = math.log(2 * math.pi)


def tiny_flow(seed=0, **kw):
    return HyperNetwork(1, FlowConfig(target_dim=1, hidden_widths=(8,), rk4_steps=6), (8,), seed=seed, **kw)


@pytest.fixture(scope="module")
def toy():
    cfg = ToyConfig(n_samples=300)
    return gen_toy(cfg, 0, "train"), gen_toy(cfg, 0, "test")


def test_nll_loss_zero_network():
    model = HyperNetwork(1, FlowConfig(target_dim=2, hidden_widths=(4,), rk4_steps=4), (4,))
    model.psi.data[:] = 0.0
    x = np.zeros((3, 1))
    loss = nll_loss(model, x, np.zeros((3, 2)))
    assert loss.item() == pytest.approx(LOG_2PI, abs=1e-12)
    loss = nll_loss(model, x[:2], np.array([[1.0, 0.0], [-1.0, 0.0]]))
    assert loss.item() == pytest.approx(LOG_2PI + 0.5, abs=1e-12)


def test_nll_loss_empty_batch():
    with pytest.raises(ValueError):
        nll_loss(tiny_flow(), np.zeros((0, 1)), np.zeros((0, 1)))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nll_loss_reports_nonfinite():
    model = MdnModel(1, 1, k=2)
    model.psi.data[:] = 1e200
    with pytest.raises(NonFiniteLossError):
        nll_loss(model, np.ones((2, 1)), np.ones((2, 1)))


def test_adam_first_step_has_size_lr():
    cfg = TrainConfig(learning_rate=0.1, grad_clip_norm=None)
    p, _ = adam_step(np.zeros(3), np.array([2.0, -5.0, 0.3]), AdamState.zeros_like(np.zeros(3)), cfg)
    np.testing.assert_allclose(p, [-0.1, 0.1, -0.1], rtol=1e-6)


def test_adam_zero_gradient_is_noop():
    cfg = TrainConfig(learning_rate=0.1)
    p0 = np.array([1.0, 2.0])
    p, state = adam_step(p0, np.zeros(2), AdamState.zeros_like(p0), cfg)
    np.testing.assert_array_equal(p, p0)
    assert state.t == 1


def test_adam_constant_gradient_steady_size():
    cfg = TrainConfig(learning_rate=0.01, grad_clip_norm=None)
    p, state = np.zeros(2), AdamState.zeros_like(np.zeros(2))
    for _ in range(200):
        prev = p
        p, state = adam_step(p, np.array([3.0, -0.5]), state, cfg)
    np.testing.assert_allclose(np.abs(p - prev), 0.01, rtol=1e-4)


def test_adam_shape_mismatch():
    with pytest.raises(ValueError):
        adam_step(np.zeros(3), np.zeros(2), AdamState.zeros_like(np.zeros(3)), TrainConfig())


@pytest.mark.parametrize("bad", [{"learning_rate": 0}, {"batch_size": 0}, {"max_steps": -1}])
def test_invalid_train_config(bad):
    with pytest.raises(ValueError):
        TrainConfig(**bad)


def test_zero_steps_leaves_parameters(toy):
    model = tiny_flow()
    before = model.psi.data.copy()
    _, log = train(model, toy[0], TrainConfig(max_steps=0))
    assert log.steps == []
    np.testing.assert_array_equal(model.psi.data, before)


def test_training_is_deterministic(toy, tmp_path):
    runs = []
    for name in ("a", "b"):
        out = tmp_path / name
        out.mkdir()
        model = tiny_flow(seed=1)
        _, log = train(model, toy[0], TrainConfig(max_steps=5, batch_size=16, eval_every=5), out, toy[1])
        log.write(out / "train_log.csv")
        runs.append(out)
    for f in ("model.rgfl", "train_log.csv", "train_log_eval.csv"):
        assert (runs[0] / f).read_bytes() == (runs[1] / f).read_bytes()
    lines = (runs[0] / "train_log.csv").read_text().splitlines()
    assert lines[0] == "step,nll,grad_norm,learning_rate" and len(lines) == 6


def test_first_step_loss_near_standard_normal(toy):
    model = tiny_flow(seed=0)
    _, log = train(model, toy[0], TrainConfig(max_steps=1, batch_size=128))
    idx = np.random.default_rng(0).integers(0, len(toy[0]), 128)
    ref = float(np.mean(0.5 * toy[0].y[idx, 0] ** 2 + 0.5 * LOG_2PI))
    assert log.steps[0].nll == pytest.approx(ref, abs=0.05)


def test_mdn_training_decreases_nll(toy):
    model = MdnModel(1, 1, k=4, hidden_widths=(16,), seed=0)
    _, log = train(model, toy[0], TrainConfig(max_steps=300, learning_rate=1e-2, batch_size=64))
    curve = smoothed(log.nll_curve(), 50)
    assert curve[-1] < curve[0] - 0.5


def test_mdn_epoch_curve_is_nonincreasing():
    train_ds = gen_toy(ToyConfig(), 0, "train")
    model = MdnModel(1, 1, k=8, seed=0)
    _, log = train(model, train_ds, TrainConfig(max_steps=16 * 60))
    epochs = log.nll_curve().reshape(60, 16).mean(axis=1)
    curve = smoothed(epochs, 10)
    # constant-lr Adam leaves small wiggles on top of the downward trend
    assert np.diff(curve).max() <= 0.01
    assert curve[-1] < curve[0] - 1.0


def test_wrong_split_rejected(toy):
    with pytest.raises(ValueError):
        train(tiny_flow(), toy[1], TrainConfig(max_steps=1))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_abort_saves_checkpoint(tmp_path):
    ds = Dataset(np.ones((4, 1)), np.ones((4, 1)), 0, "toy", "train")
    model = MdnModel(1, 1, k=2)
    model.psi.data[:] = 1e200
    with pytest.raises(TrainingAborted) as info:
        train(model, ds, TrainConfig(max_steps=3), tmp_path)
    assert info.value.step == 1
    assert (tmp_path / "model.rgmd").exists()
    assert "aborted_at_step=1" in (tmp_path / "model.rgmd.meta.txt").read_text()


def test_evaluate_zero_network(toy):
    model = tiny_flow()
    model.psi.data[:] = 0.0
    (row,) = evaluate(model, toy[1], ["nll"])
    ref = float(np.mean(0.5 * toy[1].y[:, 0] ** 2 + 0.5 * LOG_2PI))
    assert row.value == pytest.approx(ref, abs=1e-9)
    assert row.n == len(toy[1])
    assert heldout_nll(model, toy[1]) == pytest.approx(ref, abs=1e-9)


def test_evaluate_truth_against_itself(toy):
    truth = GroundTruth(toy[1].config)
    (row,) = evaluate(truth, toy[1], ["emd"], truth=truth, n_samples=64)
    assert row.value == 0.0


def test_evaluate_rejects_unknown_metric(toy):
    with pytest.raises(ValueError, match="unknown metric"):
        evaluate(tiny_flow(), toy[1], ["nll", "bogus"])


def test_demd_row_has_spread(toy, tmp_path):
    model = tiny_flow(output_scale=0.5)
    rows = evaluate(model, toy[1], ["demd"], probes=np.array([[0.0], [3.0]]), n_samples=32, demd_seeds=4)
    assert rows[0].stddev > 0
    write_report(rows, tmp_path / "r.csv")
    head = (tmp_path / "r.csv").read_text().splitlines()[0]
    assert head == "metric,model,dataset,value,stddev,n,seed"


def test_no_tape_leak_after_training(toy):
    train(tiny_flow(), toy[0], TrainConfig(max_steps=2, batch_size=8))
    assert ad._active_tape() is None


@pytest.mark.slow
def test_toy_training_makes_progress():
    train_ds = gen_toy(ToyConfig(), 0, "train")
    model = HyperNetwork(1, FlowConfig(target_dim=1, hidden_widths=(32,)), seed=0)
    _, log = train(model, train_ds, TrainConfig(learning_rate=1e-3, max_steps=5000))
    step0 = float(np.mean(0.5 * train_ds.y[:, 0] ** 2 + 0.5 * LOG_2PI))
    assert smoothed(log.nll_curve(), 100)[-1] <= step0 - 0.5
