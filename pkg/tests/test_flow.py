import math

import numpy as np
import pytest

from regflow import autodiff as ad
from regflow.autodiff import grad_check
from regflow.flow import (
    FlowBlowupError,
    FlowConfig,
    FlowParams,
    LinearDynamics,
    MAX_TRACE_DIM,
    dynamics_eval,
    exact_trace,
    integrate_forward,
    integrate_inverse,
    layout_for,
    log_prob,
)

from oracles import grid_mass

DESK = FlowConfig(target_dim=2, hidden_widths=(32,))
LOG_2PI = math.log(2 * math.pi)


def test_config_validation():
    with pytest.raises(ValueError):
        FlowConfig(t0=1.0, t1=1.0)
    with pytest.raises(ValueError):
        FlowConfig(rk4_steps=0)
    with pytest.raises(ValueError):
        FlowConfig(target_dim=0)


def test_layout_is_contiguous_bijection():
    layout = layout_for(FlowConfig(target_dim=3, hidden_widths=(5, 7)))
    offset = 0
    for e in layout:
        assert e.offset == offset
        offset += e.size
    assert offset == (4 * 5 + 5) + (5 * 7 + 7) + (7 * 3 + 3)


def test_zero_theta_gives_zero_velocity(rng):
    theta = FlowParams.zeros(DESK)
    for _ in range(5):
        v = dynamics_eval(theta, rng.normal(size=2), rng.uniform(), DESK)
        np.testing.assert_array_equal(v.data, 0.0)


def test_dynamics_deterministic(rng):
    theta = FlowParams.random(DESK, rng)
    z = rng.normal(size=2)
    assert dynamics_eval(theta, z, 0.3, DESK).data.tobytes() == dynamics_eval(theta, z, 0.3, DESK).data.tobytes()


def test_dynamics_hand_computed_one_hidden_layer():
    cfg = FlowConfig(target_dim=2, hidden_widths=(4,))
    w1 = np.array([[0.5, -1.0, 0.2, 0.0], [0.3, 0.1, -0.4, 1.0], [1.0, 2.0, 0.0, -0.5]])
    b1 = np.array([0.1, 0.0, -0.2, 0.3])
    w2 = np.array([[1.0, 0.0], [0.5, -1.0], [0.0, 2.0], [-1.0, 1.0]])
    b2 = np.array([0.05, -0.05])
    theta = np.concatenate([w1.ravel(), b1, w2.ravel(), b2])
    z, t = np.array([1.0, 0.0]), 0.0
    # by hand: inputs [1, 0, 0] select row 0 of w1
    h = [math.tanh(0.5 + 0.1), math.tanh(-1.0), math.tanh(0.2 - 0.2), math.tanh(0.3)]
    expected = [h[0] * 1.0 + h[1] * 0.5 - h[3] + 0.05, -h[1] + 2 * h[2] + h[3] - 0.05]
    np.testing.assert_allclose(dynamics_eval(theta, z, t, cfg).data, expected, rtol=0, atol=1e-14)


def test_theta_length_mismatch_rejected():
    with pytest.raises(ValueError):
        dynamics_eval(np.zeros(10), np.zeros(2), 0.0, DESK)


def test_trace_zero_theta():
    assert float(exact_trace(FlowParams.zeros(DESK), np.ones(2), 0.5, DESK)) == 0.0


def test_trace_linear_dynamics():
    assert float(exact_trace(LinearDynamics(0.5, 2), np.ones(2), 0.0, DESK)) == pytest.approx(1.0)


def test_trace_dimension_limit():
    cfg = FlowConfig(target_dim=MAX_TRACE_DIM + 1, hidden_widths=(4,))
    with pytest.raises(ValueError, match=str(MAX_TRACE_DIM)):
        exact_trace(FlowParams.zeros(cfg), np.zeros(cfg.target_dim), 0.0, cfg)


def fd_trace(theta, z, t, cfg, eps=1e-6):
    d = len(z)
    tr = 0.0
    for k in range(d):
        e = np.zeros(d)
        e[k] = eps
        tr += (dynamics_eval(theta, z + e, t, cfg).data[k] - dynamics_eval(theta, z - e, t, cfg).data[k]) / (2 * eps)
    return tr


@pytest.mark.parametrize("cfg", [
    DESK,
    FlowConfig(target_dim=1, hidden_widths=(16,)),
    FlowConfig(target_dim=3, hidden_widths=(8, 6)),
    FlowConfig(target_dim=2, hidden_widths=(6, 5, 4)),
])
def test_exact_trace_matches_finite_differences(cfg, rng):
    for _ in range(10):
        theta = FlowParams.random(cfg, rng, scale=1.0)
        z = rng.normal(size=cfg.target_dim)
        t = rng.uniform()
        assert float(exact_trace(theta, z, t, cfg)) == pytest.approx(fd_trace(theta, z, t, cfg), abs=1e-6)


def test_trace_is_differentiable_in_theta(rng):
    cfg = FlowConfig(target_dim=2, hidden_widths=(5, 4))
    theta0 = FlowParams.random(cfg, rng).theta
    z = rng.normal(size=2)
    assert grad_check(lambda th: exact_trace(th, z, 0.4, cfg), theta0) < 1e-6


def test_identity_flow_round_trip(rng):
    theta = FlowParams.zeros(DESK)
    y = rng.normal(size=2)
    z, ld = integrate_inverse(theta, y, DESK)
    np.testing.assert_array_equal(z.data, y)
    assert float(ld) == 0.0
    np.testing.assert_array_equal(integrate_forward(theta, y, DESK).data, y)


def test_linear_dynamics_closed_form():
    lin = LinearDynamics(0.5, 2)
    z, ld = integrate_inverse(lin, np.ones(2), DESK)
    np.testing.assert_allclose(z.data, math.exp(-0.5), atol=1e-6)
    assert float(ld) == pytest.approx(-1.0, abs=1e-6)
    y = integrate_forward(lin, np.array([1.0, 0.0]), DESK)
    np.testing.assert_allclose(y.data, [math.exp(0.5), 0.0], atol=1e-6)


def test_log_prob_closed_forms():
    assert float(log_prob(FlowParams.zeros(DESK), np.zeros(2), DESK)) == pytest.approx(-LOG_2PI, abs=1e-12)
    assert float(log_prob(LinearDynamics(0.5, 2), np.zeros(2), DESK)) == pytest.approx(-LOG_2PI - 1.0, abs=1e-4)


def test_rk4_fourth_order_convergence():
    errors = []
    for steps in (2, 4, 8, 16):
        cfg = FlowConfig(target_dim=2, hidden_widths=(4,), rk4_steps=steps)
        y = integrate_forward(LinearDynamics(1.5, 2), np.array([1.0, -1.0]), cfg).data
        errors.append(abs(y[0] - math.exp(1.5)))
    for coarse, fine in zip(errors, errors[1:]):
        assert coarse / fine >= 8.0


def test_round_trip_random_theta(rng):
    theta = FlowParams.random(DESK, rng, scale=1.0)
    y = rng.normal(size=(100, 2)) * 2
    z, _ = integrate_inverse(theta, y, DESK)
    back = integrate_forward(theta, z.data, DESK).data
    assert np.abs(back - y).max() < 1e-5


def test_batched_theta_matches_shared(rng):
    theta = FlowParams.random(DESK, rng)
    y = rng.normal(size=(4, 2))
    shared = log_prob(theta, y, DESK).data
    stacked = log_prob(np.tile(theta.theta, (4, 1)), y, DESK).data
    np.testing.assert_allclose(stacked, shared, rtol=0, atol=1e-13)


@pytest.mark.parametrize("seed", range(3))
def test_random_flow_normalizes_on_grid(seed):
    rng = np.random.default_rng(seed)
    theta = FlowParams.random(DESK, rng, scale=1.0)
    with ad.no_tape():
        mass = grid_mass(lambda p: np.exp(log_prob(theta, p, DESK).data), -8.0, 8.0, 400)
    assert mass == pytest.approx(1.0, abs=0.02)


def test_log_prob_gradient_matches_finite_differences(rng):
    cfg = FlowConfig(target_dim=2, hidden_widths=(6,), rk4_steps=8)
    theta0 = FlowParams.random(cfg, rng, scale=1.0).theta
    y = rng.normal(size=2)
    assert grad_check(lambda th: log_prob(th, y, cfg), theta0) < 1e-3


def test_blowup_is_signalled():
    cfg = FlowConfig(target_dim=1, hidden_widths=(4,), rk4_steps=2)
    with pytest.raises(FlowBlowupError), np.errstate(over="ignore", invalid="ignore"):
        integrate_forward(LinearDynamics(1e300, 1), np.array([1.0]), cfg)
