import numpy as np
import pytest
from scipy.integrate import quad

from emgps.sim import (ConfigError, CostModel, DomainError, InitialCondition, LinearGaussianPolicy,
                       OpenLoopGaussianPolicy, SimConfig, collect_batch, cost_observation, cost_pdf,
                       euler_matrices, observe_state, rollout, running_cost, step_dynamics)

FREE = SimConfig(gravity=0.0, damping=0.0)


def test_rest_is_fixed_point():
    x = np.array([1.0, 2.0, 0.0, 0.0])
    np.testing.assert_array_equal(step_dynamics(x, np.zeros(2), FREE), x)


def test_pure_drift():
    x = np.array([0.0, 0.0, 1.0, 0.0])
    out = step_dynamics(x, np.zeros(2), FREE)
    np.testing.assert_allclose(out[:2], [0.1, 0.0])


def test_thrust_cancels_gravity():
    cfg = SimConfig(gravity=-9.8, mass=2.0)
    out = step_dynamics(np.zeros(4), np.array([0.0, 2.0 * 9.8]), cfg)
    np.testing.assert_allclose(out, 0.0, atol=1e-15)


def test_euler_matrices_match_step(rng):
    cfg = SimConfig(damping=0.3, mass=1.7)
    A, B, c = euler_matrices(cfg)
    for _ in range(20):
        x, u = rng.standard_normal(4), rng.standard_normal(2)
        np.testing.assert_allclose(step_dynamics(x, u, cfg), A @ x + B @ u + c, atol=1e-13)


def test_nonfinite_rejected():
    with pytest.raises(DomainError):
        step_dynamics([np.nan, 0, 0, 0], [0, 0], FREE)


@pytest.mark.parametrize("kw", [{"dt": 0.0}, {"damping": -1.0}, {"noise_factor": -0.1},
                                {"horizon": 0}, {"mass": 0.0}])
def test_sim_config_invariants(kw):
    with pytest.raises(ConfigError):
        SimConfig(**kw)


def test_observation_noise():
    x = np.arange(4.0)
    np.testing.assert_array_equal(observe_state(x, 0.0, np.random.default_rng(0)), x)
    rng = np.random.default_rng(7)
    draws = np.stack([observe_state(x, 0.3, rng) for _ in range(100_000)])
    np.testing.assert_allclose(draws.var(axis=0), 0.3, rtol=0.05)
    a = observe_state(x, 0.3, np.random.default_rng(5))
    b = observe_state(x, 0.3, np.random.default_rng(5))
    np.testing.assert_array_equal(a, b)


def test_running_cost_cases():
    cm = CostModel()
    assert running_cost(cm.target_state, cm.target_action, cm) == 0.0
    assert running_cost(cm.target_state + [1, 0, 0, 0], cm.target_action, cm) == pytest.approx(1.0)
    assert running_cost(cm.target_state, [1.0, 0.0], cm) == pytest.approx(5e-5)


def test_cost_observation():
    assert cost_observation(0.0) == 1.0
    assert cost_observation(1.0) == pytest.approx(0.36787944117)
    vals = [cost_observation(Y) for Y in (10, 100, 1000, 1e6)]
    assert all(v >= 0 for v in vals) and vals == sorted(vals, reverse=True)
    with pytest.raises(DomainError):
        cost_observation(-1.0)


def test_cost_pdf():
    assert cost_pdf(0.0, 3.0) == 3.0
    assert cost_pdf(np.log(2) / 2, 2.0) == pytest.approx(1.0)
    total, _ = quad(lambda Y: cost_pdf(Y, 2.5), 0, np.inf)
    assert total == pytest.approx(1.0, abs=1e-8)
    with pytest.raises(ConfigError):
        cost_pdf(1.0, 1.0)


def test_cost_model_lambda_check():
    with pytest.raises(ConfigError):
        CostModel(lam=0.5)


def test_rollout_shapes_and_determinism():
    cfg, cm = SimConfig(), CostModel()
    ic = InitialCondition([0.0, 5.0])
    pol = OpenLoopGaussianPolicy([0.0, 9.8], 1.0, cfg.horizon)
    t = rollout(pol, ic, cfg, cm, 11)
    assert t.actions.shape == (30, 2) and t.true_states.shape == (31, 4)
    assert t.observed_states.shape == (31, 4)
    np.testing.assert_allclose(t.cost_observations, np.exp(-t.running_costs))
    t2 = rollout(pol, ic, cfg, cm, 11)
    np.testing.assert_array_equal(t.true_states, t2.true_states)


def test_noiseless_rollouts_identical():
    cfg = SimConfig(noise_factor=0.0)
    ic = InitialCondition([0.0, 5.0], np.zeros((4, 4)))
    K = cfg.horizon
    pol = LinearGaussianPolicy(np.zeros((K, 2, 4)), np.ones((K, 2)), np.zeros((K, 2, 2)))
    a = rollout(pol, ic, cfg, CostModel(), 1)
    b = rollout(pol, ic, cfg, CostModel(), 2)
    np.testing.assert_array_equal(a.true_states, b.true_states)


def test_zero_policy_falls():
    cfg = SimConfig(noise_factor=0.0, damping=0.0)
    ic = InitialCondition([0.0, 5.0], np.zeros((4, 4)))
    K = cfg.horizon
    pol = LinearGaussianPolicy(np.zeros((K, 2, 4)), np.zeros((K, 2)), np.zeros((K, 2, 2)))
    t = rollout(pol, ic, cfg, CostModel(), 0)
    # y_{k+1} = y_k - g dt^2 (k + 1) by hand for the first three steps
    np.testing.assert_allclose(t.true_states[1:4, 1], 5.0 - 0.098 * np.array([1, 3, 6]))
    assert np.all(np.diff(t.true_states[1:, 1]) < 0)


def test_rollout_rejects_bad_covariance():
    K = 30
    pol = LinearGaussianPolicy(np.zeros((K, 2, 4)), np.zeros((K, 2)), np.tile(-np.eye(2), (K, 1, 1)))
    with pytest.raises(DomainError):
        rollout(pol, InitialCondition([0, 5]), SimConfig(), CostModel(), 0)


def test_collect_batch_contract():
    cfg, cm = SimConfig(), CostModel()
    ic = InitialCondition([0.0, 5.0])
    pol = OpenLoopGaussianPolicy([0.0, 9.8], 2.0, cfg.horizon)
    one = collect_batch(pol, ic, 1, cfg, cm, 3)
    assert len(one) == 1
    np.testing.assert_array_equal(one[0].actions, rollout(pol, ic, cfg, cm, one[0].seed).actions)
    a = collect_batch(pol, ic, 50, cfg, cm, 9)
    b = collect_batch(pol, ic, 50, cfg, cm, 9)
    assert len({t.seed for t in a}) == 50
    assert all(np.array_equal(x.actions, y.actions) for x, y in zip(a, b))
    ybar = np.mean([t.cost_observations for t in a], axis=0)
    assert np.all((ybar >= 0) & (ybar <= 1))
    with pytest.raises(ConfigError):
        collect_batch(pol, ic, 0, cfg, cm, 9)
