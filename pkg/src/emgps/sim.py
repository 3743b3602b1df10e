"""Analytic 2-D point mass with noisy state observations.

State is ``[x, y, xdot, ydot]``, the action is a 2-D force.  Integration is
semi-implicit Euler, so one step is an exact affine map of (state, action),
which keeps a fitted linear model exact when there is no observation noise.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

N_X = 4
N_U = 2


class DomainError(ValueError):
    """Raised on non-finite or out-of-domain inputs."""


class ConfigError(ValueError):
    """Raised when a configuration violates its invariants."""


@dataclass
class SimConfig:
    dt: float = 0.1
    gravity: float = -9.8
    damping: float = 0.1
    noise_factor: float = 0.3
    horizon: int = 30
    mass: float = 1.0

    def __post_init__(self):
        if not self.dt > 0:
            raise ConfigError(f"dt must be positive, got {self.dt}")
        if self.damping < 0:
            raise ConfigError(f"damping must be >= 0, got {self.damping}")
        if self.noise_factor < 0:
            raise ConfigError(f"noise_factor must be >= 0, got {self.noise_factor}")
        if int(self.horizon) < 1:
            raise ConfigError(f"horizon must be >= 1, got {self.horizon}")
        if not self.mass > 0:
            raise ConfigError(f"mass must be positive, got {self.mass}")
        self.horizon = int(self.horizon)


@dataclass
class CostModel:
    target_state: np.ndarray = field(default_factory=lambda: np.array([5.0, 20.0, 0.0, 0.0]))
    target_action: np.ndarray = field(default_factory=lambda: np.zeros(N_U))
    Qx: np.ndarray = field(default_factory=lambda: np.eye(N_X))
    Qu: np.ndarray = field(default_factory=lambda: 5e-5 * np.eye(N_U))
    lam: float = 2.0

    def __post_init__(self):
        self.target_state = np.asarray(self.target_state, dtype=float)
        self.target_action = np.asarray(self.target_action, dtype=float)
        self.Qx = np.asarray(self.Qx, dtype=float)
        self.Qu = np.asarray(self.Qu, dtype=float)
        for name, Q in (("Qx", self.Qx), ("Qu", self.Qu)):
            if not np.allclose(Q, Q.T):
                raise ConfigError(f"{name} must be symmetric")
            if np.linalg.eigvalsh(Q).min() <= 0:
                raise ConfigError(f"{name} must be positive definite")
        if not self.lam > 1:
            raise ConfigError(f"lambda must exceed 1, got {self.lam}")


@dataclass
class InitialCondition:
    mean: np.ndarray
    cov: np.ndarray = field(default_factory=lambda: 1e-2 * np.eye(N_X))

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float)
        if self.mean.shape == (2,):
            self.mean = np.concatenate([self.mean, np.zeros(2)])
        self.cov = np.asarray(self.cov, dtype=float)
        if not np.allclose(self.cov, self.cov.T):
            raise ConfigError("initial covariance must be symmetric")
        if np.linalg.eigvalsh(self.cov).min() < -1e-12:
            raise ConfigError("initial covariance must be PSD")

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        if not np.any(self.cov):
            return self.mean.copy()
        L = _psd_sqrt(self.cov)
        return self.mean + L @ rng.standard_normal(N_X)


@dataclass
class Trajectory:
    """One episode.

    ``true_states`` and ``observed_states`` have K+1 rows (the terminal
    observation is needed to fit the last transition); per-action arrays have K.
    """

    true_states: np.ndarray
    observed_states: np.ndarray
    actions: np.ndarray
    action_means: np.ndarray
    running_costs: np.ndarray
    cost_observations: np.ndarray
    seed: int

    @property
    def horizon(self) -> int:
        return len(self.actions)


def _psd_sqrt(P):
    w, V = np.linalg.eigh(P)
    return V * np.sqrt(np.clip(w, 0.0, None))


def _check_finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise DomainError("non-finite input")


def euler_matrices(cfg: SimConfig):
    """Return ``(A, B, c)`` with ``step(x, u) == A @ x + B @ u + c``."""
    dt, d, m = cfg.dt, cfg.damping, cfg.mass
    decay = 1.0 - dt * d
    A = np.eye(N_X)
    A[2, 2] = A[3, 3] = decay
    A[0, 2] = A[1, 3] = dt * decay
    B = np.zeros((N_X, N_U))
    B[2, 0] = B[3, 1] = dt / m
    B[0, 0] = B[1, 1] = dt * dt / m
    g = np.array([0.0, cfg.gravity])
    c = np.concatenate([dt * dt * g, dt * g])
    return A, B, c


def step_dynamics(state, action, cfg: SimConfig) -> np.ndarray:
    state = np.asarray(state, dtype=float)
    action = np.asarray(action, dtype=float)
    _check_finite(state, action)
    pos, vel = state[:2], state[2:]
    acc = action / cfg.mass + np.array([0.0, cfg.gravity]) - cfg.damping * vel
    vel_next = vel + cfg.dt * acc
    pos_next = pos + cfg.dt * vel_next
    return np.concatenate([pos_next, vel_next])


def observe_state(true_state, noise_factor: float, rng: np.random.Generator) -> np.ndarray:
    true_state = np.asarray(true_state, dtype=float)
    if noise_factor == 0:
        return true_state.copy()
    return true_state + np.sqrt(noise_factor) * rng.standard_normal(true_state.shape)


def running_cost(x, u, cm: CostModel) -> float:
    dx = np.asarray(x, dtype=float) - cm.target_state
    du = np.asarray(u, dtype=float) - cm.target_action
    return float(dx @ cm.Qx @ dx + du @ cm.Qu @ du)


def cost_observation(Y: float) -> float:
    if Y < 0:
        raise DomainError(f"running cost must be nonnegative, got {Y}")
    return float(np.exp(-Y))


def cost_pdf(Y: float, lam: float) -> float:
    if not lam > 1:
        raise ConfigError(f"lambda must exceed 1, got {lam}")
    if Y < 0:
        raise DomainError(f"running cost must be nonnegative, got {Y}")
    return float(lam * np.exp(-lam * Y))


# A policy maps (k, observed_state) to (action_mean, action_cov); k is 0-based.
Policy = Callable[[int, np.ndarray], "tuple[np.ndarray, np.ndarray]"]


class LinearGaussianPolicy:
    """Time-varying ``u ~ N(F_k x + e_k, Sigma_k)``."""

    def __init__(self, F, e, cov):
        self.F = np.asarray(F, dtype=float)
        self.e = np.asarray(e, dtype=float)
        self.cov = np.asarray(cov, dtype=float)

    def __call__(self, k, x):
        return self.F[k] @ x + self.e[k], self.cov[k]


class OpenLoopGaussianPolicy:
    """State-independent exploration noise around a fixed mean action."""

    def __init__(self, mean, std, horizon):
        self.mean = np.asarray(mean, dtype=float)
        self.cov = np.tile((std ** 2) * np.eye(len(self.mean)), (horizon, 1, 1))

    def __call__(self, k, x):
        return self.mean.copy(), self.cov[k]


def rollout(policy: Policy, ic: InitialCondition, cfg: SimConfig, cm: CostModel,
            rng: np.random.Generator | int, seed: int | None = None) -> Trajectory:
    """Run one episode; the policy only ever sees the observed state."""
    if not isinstance(rng, np.random.Generator):
        seed = int(rng) if seed is None else seed
        rng = np.random.default_rng(rng)
    K = cfg.horizon
    x_true = np.empty((K + 1, N_X))
    x_obs = np.empty((K + 1, N_X))
    u = np.empty((K, N_U))
    mu = np.empty((K, N_U))
    Y = np.empty(K)
    x_true[0] = ic.sample(rng)
    for k in range(K):
        x_obs[k] = observe_state(x_true[k], cfg.noise_factor, rng)
        mean, cov = policy(k, x_obs[k])
        cov = np.asarray(cov, dtype=float)
        if np.linalg.eigvalsh(0.5 * (cov + cov.T)).min() < -1e-10:
            raise DomainError(f"policy covariance at step {k} is not PSD")
        mu[k] = mean
        u[k] = mean + _psd_sqrt(cov) @ rng.standard_normal(N_U) if np.any(cov) else mean
        Y[k] = running_cost(x_true[k], u[k], cm)
        x_true[k + 1] = step_dynamics(x_true[k], u[k], cfg)
    x_obs[K] = observe_state(x_true[K], cfg.noise_factor, rng)
    return Trajectory(x_true, x_obs, u, mu, Y, np.exp(-Y), -1 if seed is None else int(seed))


def derive_seeds(master_seed: int, count: int) -> list[int]:
    ss = np.random.SeedSequence(master_seed)
    return [int(s.generate_state(1, dtype=np.uint32)[0]) for s in ss.spawn(count)]


def collect_batch(policy: Policy, ic: InitialCondition, count: int, cfg: SimConfig,
                  cm: CostModel, seed: int) -> list[Trajectory]:
    if count < 1:
        raise ConfigError("batch size must be >= 1")
    return [rollout(policy, ic, cfg, cm, s) for s in derive_seeds(seed, count)]


def stack_batch(batch: Sequence[Trajectory]) -> dict:
    return {
        "x": np.stack([t.observed_states for t in batch]),
        "u": np.stack([t.actions for t in batch]),
        "y": np.stack([t.cost_observations for t in batch]),
    }
