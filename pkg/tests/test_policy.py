import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from emgps.controller import ControllerParams
from emgps.policy import (GlobalPolicy, PolicyNet, TrainConfig, TrainingError, TrainingSample,
                          build_training_set, gaussian_kl, global_covariance, kl_sample_loss,
                          mlp_backward, mlp_forward, theorem1_check, train_supervised)
from emgps.sim import CostModel, InitialCondition, LinearGaussianPolicy, SimConfig, collect_batch

from conftest import random_spd


def _zero_net(sizes=(4, 42, 42, 2)):
    net = PolicyNet.init(sizes)
    return PolicyNet([np.zeros_like(W) for W in net.weights], [np.zeros_like(b) for b in net.biases])


def test_zero_net_outputs_zero(rng):
    np.testing.assert_array_equal(mlp_forward(_zero_net(), rng.standard_normal((5, 4))), 0.0)


def test_hand_computed_path():
    # x -> relu(2 x0 - 1) -> relu(3 h + 0.5) -> -h + 1
    W1 = np.zeros((1, 4)); W1[0, 0] = 2.0
    net = PolicyNet([W1, np.array([[3.0]]), np.array([[-1.0]])],
                    [np.array([-1.0]), np.array([0.5]), np.array([1.0])])
    assert mlp_forward(net, [2.0, 9, 9, 9])[0] == pytest.approx(-(3 * 3 + 0.5) + 1)
    assert mlp_forward(net, [0.0, 9, 9, 9])[0] == pytest.approx(-0.5 + 1)


def test_positive_homogeneity(rng):
    net = PolicyNet.init(seed=3)
    net.biases = [np.zeros_like(b) for b in net.biases]
    x = rng.standard_normal(4)
    np.testing.assert_allclose(mlp_forward(net, 2.5 * x), 2.5 * mlp_forward(net, x), rtol=1e-12)


def test_batch_and_single_agree(rng):
    net = PolicyNet.init(seed=1)
    X = rng.standard_normal((6, 4))
    np.testing.assert_allclose(mlp_forward(net, X)[2], mlp_forward(net, X[2]))


def test_backward_trivial_cases(rng):
    net = PolicyNet.init(seed=2)
    x = rng.standard_normal(4)
    for g in mlp_backward(net, x, np.zeros(2)):
        np.testing.assert_array_equal(g, 0.0)
    up = rng.standard_normal(2)
    np.testing.assert_allclose(mlp_backward(net, x, up)[-1], up)


def _fd_check(net, x, up, h=1e-6):
    grads = mlp_backward(net, x, up)
    worst = 0.0
    for p, g in zip(net.params, grads):
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + h
            fp = float(np.sum(up * mlp_forward(net, x)))
            p[idx] = old - h
            fm = float(np.sum(up * mlp_forward(net, x)))
            p[idx] = old
            fd = (fp - fm) / (2 * h)
            worst = max(worst, abs(fd - g[idx]) / max(1.0, abs(fd), abs(g[idx])))
    return worst


def test_backward_matches_finite_differences_small(rng):
    for seed in range(5):
        net = PolicyNet.init((4, 6, 5, 2), seed=seed)
        net.biases = [rng.standard_normal(b.shape) * 0.1 for b in net.biases]
        assert _fd_check(net, rng.standard_normal((3, 4)), rng.standard_normal((3, 2))) < 1e-5


def test_kl_closed_form_cases():
    net = _zero_net()
    s = TrainingSample(np.ones(4), np.zeros(2), np.eye(2), 0, 0, 0, 0)
    quad, full = kl_sample_loss(net, s, np.eye(2))
    assert quad == 0.0 and full == pytest.approx(0.0, abs=1e-14)
    s = TrainingSample(np.ones(4), np.array([-1.0, 0.0]), np.eye(2), 0, 0, 0, 0)
    quad, full = kl_sample_loss(net, s)
    assert quad == pytest.approx(0.5) and full is None
    with pytest.raises(ValueError):
        kl_sample_loss(net, TrainingSample(np.ones(4), np.zeros(2), -np.eye(2), 0, 0, 0, 0))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6))
def test_kl_nonnegative(seed):
    r = np.random.default_rng(seed)
    a, b = random_spd(r, 2), random_spd(r, 2)
    mu = r.standard_normal(2)
    assert gaussian_kl(mu, a, mu + r.standard_normal(2), b) >= -1e-12
    assert gaussian_kl(mu, a, mu, a) == pytest.approx(0.0, abs=1e-12)


def test_train_zero_residual(rng):
    teacher = PolicyNet.init(seed=5)
    X = rng.standard_normal((100, 4))
    T = mlp_forward(teacher, X)
    samples = [TrainingSample(x, t, np.eye(2), 0, 0, j, 0) for j, (x, t) in enumerate(zip(X, T))]
    res = train_supervised(samples, teacher, TrainConfig(epochs=3, batches_per_epoch=10),
                           refit_normalization=False)
    assert max(res.loss_trace) < 1e-10


def test_train_linear_targets(rng):
    Fm = rng.standard_normal((2, 4))
    X = rng.standard_normal((2000, 4)) * 3
    samples = [TrainingSample(x, Fm @ x + 1.0, np.eye(2), 0, 0, j, 0) for j, x in enumerate(X)]
    res = train_supervised(samples, cfg=TrainConfig(epochs=120, seed=1))
    Xt = rng.standard_normal((500, 4)) * 3
    mse = np.mean((mlp_forward(res.net, Xt) - (Xt @ Fm.T + 1.0)) ** 2)
    assert mse < 1e-2


def test_schedule_reflected_in_trace():
    samples = [TrainingSample(np.ones(4) * j, np.zeros(2), np.eye(2), 0, 0, j, 0) for j in range(30)]
    res = train_supervised(samples, cfg=TrainConfig(epochs=7, minibatch=25, batches_per_epoch=50))
    assert len(res.loss_trace) == 7 and len(res.batch_losses) == 350


def test_training_deterministic_and_warm_start():
    samples = [TrainingSample(np.arange(4.0) * j, np.ones(2) * j, np.eye(2), 0, 0, j, 0) for j in range(40)]
    cfg = TrainConfig(epochs=5, seed=2)
    a = train_supervised(samples, cfg=cfg)
    b = train_supervised(samples, cfg=cfg)
    assert a.loss_trace == b.loss_trace
    warm = train_supervised(samples, a.net, cfg)
    cold = train_supervised(samples, a.net, TrainConfig(epochs=5, seed=2, warm_start=False))
    assert cold.loss_trace == a.loss_trace
    assert warm.loss_trace[0] < a.loss_trace[0]


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nonfinite_loss_aborts():
    samples = [TrainingSample(np.ones(4), np.array([np.inf, 0.0]), np.eye(2), 0, 0, 0, 0)] * 30
    with pytest.raises(TrainingError, match="batch"):
        train_supervised(samples, cfg=TrainConfig(epochs=1))
    with pytest.raises(TrainingError):
        train_supervised([])


def test_convex_loss_trace_smoothed_non_increasing(rng):
    lin = PolicyNet.init((4, 2), seed=0)
    X = rng.standard_normal((400, 4))
    samples = [TrainingSample(x, x[:2] * 2 - x[2:], np.eye(2), 0, 0, j, 0) for j, x in enumerate(X)]
    res = train_supervised(samples, lin, TrainConfig(epochs=40, seed=0), sizes=(4, 2))
    sm = np.convolve(res.batch_losses, np.ones(50) / 50, mode="valid")[::50]
    assert np.all(np.diff(sm) <= 1e-9)


def test_global_covariance_cases(rng):
    S = random_spd(rng, 2)
    np.testing.assert_allclose(global_covariance(S[None, None], "full")[0], S)
    np.testing.assert_allclose(global_covariance(S[None, None], "diag")[0], np.diag(np.linalg.eigvalsh(S)))
    np.testing.assert_allclose(global_covariance(S[None, None], "diag", "entries")[0], np.diag(np.diag(S)))
    two = np.array([[[[1.0]]], [[[3.0]]]])
    assert global_covariance(two, "full")[0, 0, 0] == pytest.approx(1.5)
    with pytest.raises(ValueError):
        global_covariance(np.zeros((1, 1, 2, 2)))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10**6), st.integers(1, 4))
def test_global_covariance_pd_and_between(seed, C):
    r = np.random.default_rng(seed)
    covs = np.stack([[random_spd(r, 2)] for _ in range(C)])
    full = global_covariance(covs, "full")
    assert np.linalg.eigvalsh(full).min() > 0
    diag = global_covariance(covs, "diag")[0]
    eig = np.stack([np.linalg.eigvalsh(c[0]) for c in covs])
    d = np.diag(diag)
    assert np.all(eig.min(axis=0) - 1e-12 <= d) and np.all(d <= eig.max(axis=0) + 1e-12)


def test_theorem1_equality_case():
    rep = theorem1_check(global_covariance(np.eye(2)[None, None], "diag"), np.eye(2)[None, None])
    assert rep.lhs == pytest.approx(2.0) and rep.rhs == pytest.approx(2.0) and rep.holds


def test_theorem1_shrinking_increases_lhs(rng):
    init = np.stack([[random_spd(rng, 2) for _ in range(3)] for _ in range(2)])
    prev = -np.inf
    for s in (1.0, 0.7, 0.4, 0.1):
        rep = theorem1_check(global_covariance(s * init, "diag"), init)
        assert rep.lhs > prev and rep.holds
        prev = rep.lhs


def _rollouts(F_scale=0.0, cov_scale=1.0):
    cfg, cm = SimConfig(), CostModel()
    K = cfg.horizon
    th = ControllerParams.from_cov(np.full((K, 2, 4), F_scale), np.ones((K, 2)),
                                   np.tile(cov_scale * np.eye(2), (K, 1, 1)))
    ics = [InitialCondition([0.0, 5.0]), InitialCondition([2.0, 5.5])]
    rolls = {c: collect_batch(LinearGaussianPolicy(th.F, th.e, th.cov), ic, 10, cfg, cm, c)
             for c, ic in enumerate(ics)}
    return rolls, {0: th, 1: th}


def test_training_set_size_and_weights():
    rolls, params = _rollouts(0.1, 2.0)
    samples = build_training_set(rolls, params, 3)
    assert len(samples) == 600
    s = samples[37]
    np.testing.assert_allclose(np.linalg.inv(s.weight), params[s.c].cov[s.k])
    assert s.i == 3


def test_training_targets_equal_action_means():
    rolls, params = _rollouts(0.1, 1e-8)
    for s in build_training_set(rolls, params, 0):
        np.testing.assert_allclose(s.target, rolls[s.c][s.s].action_means[s.k], atol=1e-12)


def test_training_set_missing_rollout():
    rolls, params = _rollouts()
    rolls[1][4] = None
    with pytest.raises(KeyError, match="c=1, s=4"):
        build_training_set(rolls, params, 0)


def test_global_policy_interface(rng):
    gp = GlobalPolicy(PolicyNet.init(seed=0), np.tile(np.eye(2), (30, 1, 1)))
    mean, cov = gp(3, rng.standard_normal(4))
    assert mean.shape == (2,) and np.allclose(cov, np.eye(2))
    with pytest.raises(ValueError):
        GlobalPolicy(gp.net, -np.tile(np.eye(2), (30, 1, 1)))
