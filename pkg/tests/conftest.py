import numpy as np
import pytest


def random_spd(rng, n, scale=1.0, floor=0.1):
    A = rng.standard_normal((n, n))
    return scale * (A @ A.T / n + floor * np.eye(n))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_model(rng, K, nx, nu, obs_scale=1.0, sy=0.5):
    """Small well-conditioned time-varying linear model for E-step tests."""
    from emgps.dynamics import TimeVaryingLinearModel
    Ad = np.stack([np.eye(nx) * 0.9 + 0.1 * rng.standard_normal((nx, nx)) for _ in range(K)])
    Bd = rng.standard_normal((K, nx, nu)) * 0.5
    cd = rng.standard_normal((K, nx)) * 0.1
    Sd = np.stack([random_spd(rng, nx, 0.2) for _ in range(K)])
    Ay = rng.standard_normal((K, nx)) * obs_scale
    By = rng.standard_normal((K, nu)) * obs_scale
    cy = rng.standard_normal(K) * 0.1
    Sy = np.full(K, sy)
    return TimeVaryingLinearModel(Ad, Bd, cd, Sd, Ay, By, cy, Sy)


def random_controller(rng, K, nx, nu, scale=0.3):
    from emgps.controller import ControllerParams
    F = rng.standard_normal((K, nu, nx)) * scale
    e = rng.standard_normal((K, nu)) * scale
    cov = np.stack([random_spd(rng, nu, 0.5) for _ in range(K)])
    return ControllerParams.from_cov(F, e, cov)


def dense_posterior(clm, y, m0, P0):
    """Brute-force joint Gaussian over (x_0..x_K, y_0..y_{K-1}) conditioned on y."""
    K, nx = clm.A.shape[0], clm.A.shape[1]
    nX = (K + 1) * nx
    nE = nx + K * nx + K                      # x0 deviation, process noise, obs noise
    L = np.zeros((nX + K, nE))
    mu = np.zeros(nX + K)
    Phi_rows = []
    Sx = np.eye(nx)                           # map from x0 deviation to x_k
    W = np.zeros((nx, K * nx))                # map from process noise to x_k
    mean = np.asarray(m0, float)
    for k in range(K + 1):
        L[k * nx:(k + 1) * nx, :nx] = Sx
        L[k * nx:(k + 1) * nx, nx:nx + K * nx] = W
        mu[k * nx:(k + 1) * nx] = mean
        if k < K:
            r = nX + k
            L[r, :nx] = clm.C[k] @ Sx
            L[r, nx:nx + K * nx] = clm.C[k] @ W
            L[r, nx + K * nx + k] = 1.0
            mu[r] = clm.C[k] @ mean + clm.d[k]
            Sx = clm.A[k] @ Sx
            W = clm.A[k] @ W
            W[:, k * nx:(k + 1) * nx] += np.eye(nx)
            mean = clm.A[k] @ mean + clm.b[k]
    noise = np.zeros((nE, nE))
    noise[:nx, :nx] = P0
    for k in range(K):
        noise[nx + k * nx:nx + (k + 1) * nx, nx + k * nx:nx + (k + 1) * nx] = clm.Q[k]
        noise[nx + K * nx + k, nx + K * nx + k] = clm.R[k]
    S = L @ noise @ L.T
    Sxx, Sxy, Syy = S[:nX, :nX], S[:nX, nX:], S[nX:, nX:]
    G = np.linalg.solve(Syy, Sxy.T).T
    r = np.asarray(y, float) - mu[nX:]
    post_mean = mu[:nX] + G @ r
    post_cov = Sxx - G @ Sxy.T
    sign, logdet = np.linalg.slogdet(Syy)
    ll = -0.5 * (K * np.log(2 * np.pi) + logdet + r @ np.linalg.solve(Syy, r))
    return post_mean.reshape(K + 1, nx), post_cov, ll


# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
