"""Time-varying linear-Gaussian dynamics and cost-observation fitting.

Each step ``k`` gets a joint Gaussian over ``[x_k, u_k, x_{k+1}, y_k]``: the
per-step empirical moments are combined with a Normal-inverse-Wishart prior
that summarises a VB-GMM fitted to the pooled data of all steps, and the
joint is then conditioned on ``(x_k, u_k)``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .sim import N_U, N_X, Trajectory
from .vbgmm import GMMModel, fit_gmm_vb

log = logging.getLogger(__name__)

JITTER = 1e-6
MAX_COND = 1e12


class FitError(RuntimeError):
    pass


@dataclass
class NIWPrior:
    mean: np.ndarray
    scatter: np.ndarray
    n0: float
    k0: float

    def __post_init__(self):
        D = len(self.mean)
        if not self.n0 > D - 1:
            raise ValueError(f"n0 must exceed dim - 1 = {D - 1}, got {self.n0}")
        if not self.k0 > 0:
            raise ValueError("k0 must be positive")


@dataclass
class EmpiricalMoments:
    mean: np.ndarray
    cov: np.ndarray


@dataclass
class StepModel:
    Ad: np.ndarray
    Bd: np.ndarray
    cd: np.ndarray
    Sd: np.ndarray
    Ay: np.ndarray
    By: np.ndarray
    cy: float
    Sy: float
    cond: float = 0.0


@dataclass
class FitConfig:
    n_components: int = 8
    gmm_iters: int = 100
    gmm_tol: float = 1e-6
    n0: float | None = None      # None -> dim + 2
    k0: float = 1.0
    bayes_update_literal: bool = False
    check_controllability: bool = True
    prior_weights: str = "global"   # or "step": mean responsibilities of step k
    seed: int = 0


@dataclass
class TimeVaryingLinearModel:
    """``x_{k+1} ~ N(Ad x + Bd u + cd, Sd)``, ``y_k ~ N(Ay x + By u + cy, Sy)``."""

    Ad: np.ndarray   # (K, nx, nx)
    Bd: np.ndarray   # (K, nx, nu)
    cd: np.ndarray   # (K, nx)
    Sd: np.ndarray   # (K, nx, nx)
    Ay: np.ndarray   # (K, nx)
    By: np.ndarray   # (K, nu)
    cy: np.ndarray   # (K,)
    Sy: np.ndarray   # (K,)
    diagnostics: dict = field(default_factory=dict)

    @property
    def horizon(self) -> int:
        return len(self.Ad)

    @property
    def nx(self) -> int:
        return self.Ad.shape[1]

    @property
    def nu(self) -> int:
        return self.Bd.shape[2]

    def AP(self, k):
        """Stacked ``[[Ad, Bd], [Ay, By]]`` for step ``k``."""
        top = np.hstack([self.Ad[k], self.Bd[k]])
        bottom = np.concatenate([self.Ay[k], self.By[k]])[None]
        return np.vstack([top, bottom])

    def SigmaP(self, k):
        S = np.zeros((self.nx + 1, self.nx + 1))
        S[:self.nx, :self.nx] = self.Sd[k]
        S[-1, -1] = self.Sy[k]
        return S

    @classmethod
    def from_steps(cls, steps: Sequence[StepModel], diagnostics=None):
        return cls(
            Ad=np.stack([s.Ad for s in steps]), Bd=np.stack([s.Bd for s in steps]),
            cd=np.stack([s.cd for s in steps]), Sd=np.stack([s.Sd for s in steps]),
            Ay=np.stack([s.Ay for s in steps]), By=np.stack([s.By for s in steps]),
            cy=np.array([s.cy for s in steps]), Sy=np.array([s.Sy for s in steps]),
            diagnostics=diagnostics or {})


def dataset_slices(batch: Sequence[Trajectory]) -> np.ndarray:
    """Stack ``[x_k, u_k, x_{k+1}, y_k]`` rows; shape ``(K, M, 2 nx + nu + 1)``."""
    xs = np.stack([t.observed_states for t in batch])       # (M, K+1, nx)
    us = np.stack([t.actions for t in batch])               # (M, K, nu)
    ys = np.stack([t.cost_observations for t in batch])     # (M, K)
    D = np.concatenate([xs[:, :-1], us, xs[:, 1:], ys[..., None]], axis=2)
    return D.transpose(1, 0, 2)


def empirical_moments(D_k) -> EmpiricalMoments:
    D_k = np.asarray(D_k, dtype=float)
    if len(D_k) < 2:
        raise ValueError("need at least two samples per step")
    mean = D_k.mean(axis=0)
    diff = D_k - mean
    cov = diff.T @ diff / len(D_k)
    return EmpiricalMoments(mean, 0.5 * (cov + cov.T))


def build_niw_prior(gmm: GMMModel, n0: float, k0: float, weights=None) -> NIWPrior:
    """Moment-match the mixture into a single NIW prior.

    ``weights`` defaults to the mixture weights; per-step weights (mean
    responsibilities of that step's data) localise the prior in time.
    """
    w = gmm.weights if weights is None else np.asarray(weights, dtype=float)
    w = w / w.sum()
    mean = w @ gmm.means
    dev = gmm.means - mean
    scatter = np.einsum("f,fij->ij", w, gmm.covs) + np.einsum("f,fi,fj->ij", w, dev, dev)
    return NIWPrior(mean, 0.5 * (scatter + scatter.T), n0, k0)


def _safe_inv(A, what):
    try:
        np.linalg.cholesky(A)
        return np.linalg.inv(A)
    except np.linalg.LinAlgError:
        log.warning("%s is singular; regularising before inversion", what)
        return np.linalg.inv(A + JITTER * np.eye(len(A)))


def make_psd(A, eps=JITTER, escalations=3):
    """Symmetrise and add ``eps I`` (escalating x10) until Cholesky succeeds."""
    A = 0.5 * (A + A.T)
    try:
        np.linalg.cholesky(A)
        return A
    except np.linalg.LinAlgError:
        pass
    I = np.eye(len(A))
    for j in range(escalations + 1):
        B = A + eps * 10 ** j * I
        try:
            np.linalg.cholesky(B)
            return B
        except np.linalg.LinAlgError:
            continue
    # last resort: eigenvalue floor
    w, V = np.linalg.eigh(A)
    return (V * np.maximum(w, eps)) @ V.T


def bayes_update(prior: NIWPrior, emp: EmpiricalMoments, M: int, literal: bool = False):
    """Posterior joint mean/covariance.

    By default the prior scale matrix is ``n0 * scatter`` (conjugate NIW
    algebra).  ``literal=True`` uses ``inv(scatter)`` in its place instead.
    """
    k0, n0 = prior.k0, prior.n0
    mean = (k0 * prior.mean + M * emp.mean) / (k0 + M)
    d = emp.mean - prior.mean
    kappa = (k0 * M / (k0 + M)) * np.outer(d, d)
    if literal:
        scale = _safe_inv(prior.scatter, "prior scatter")
    else:
        scale = n0 * prior.scatter
    cov = (scale + M * emp.cov + kappa) / (M + n0)
    return mean, make_psd(cov)


def condition_gaussian(mean, cov, nx: int = N_X, nu: int = N_U, check: bool = True) -> StepModel:
    """Condition the joint ``[x, u | x', y]`` Gaussian on its input block."""
    mean = np.asarray(mean, dtype=float)
    cov = np.asarray(cov, dtype=float)
    ni = nx + nu
    S11 = cov[:ni, :ni]
    S21 = cov[ni:, :ni]
    S22 = cov[ni:, ni:]
    cond = np.linalg.cond(S11)
    if not np.isfinite(cond) or cond > MAX_COND:
        raise FitError(f"input covariance is ill-conditioned (cond={cond:.3g})")
    gain = np.linalg.solve(S11, S21.T).T
    Sc = S22 - gain @ S21.T
    intercept = mean[ni:] - gain @ mean[:ni]
    Sd = make_psd(Sc[:nx, :nx])
    Sy = max(float(Sc[nx, nx]), JITTER)
    step = StepModel(
        Ad=gain[:nx, :nx], Bd=gain[:nx, nx:], cd=intercept[:nx], Sd=Sd,
        Ay=gain[nx, :nx], By=gain[nx, nx:], cy=float(intercept[nx]), Sy=Sy, cond=float(cond))
    if check:
        if np.linalg.eigvalsh(step.Sd).min() <= 0:
            raise FitError("dynamics covariance is not positive definite")
        if np.linalg.eigvalsh(step.Bd.T @ step.Bd).min() <= 0:
            raise FitError("Bd^T Bd is not positive definite")
    return step


def is_controllable(A, B, tol=1e-9) -> bool:
    n = A.shape[0]
    blocks = [B]
    for _ in range(n - 1):
        blocks.append(A @ blocks[-1])
    C = np.hstack(blocks)
    s = np.linalg.svd(C, compute_uv=False)
    return bool(s[-1] > tol * max(s[0], 1.0) if len(s) >= n else False)


def fit_prior_gmm(batches: Sequence[Sequence[Trajectory]], cfg: FitConfig | None = None) -> GMMModel:
    """VB-GMM over the pooled transitions of one or more batches."""
    cfg = cfg or FitConfig()
    pooled = np.concatenate([dataset_slices(b).reshape(-1, 2 * N_X + N_U + 1) for b in batches])
    F = min(cfg.n_components, len(pooled))
    return fit_gmm_vb(pooled, F, max_iter=cfg.gmm_iters, tol=cfg.gmm_tol, seed=cfg.seed)


def fit_model(batch: Sequence[Trajectory], cfg: FitConfig | None = None,
              gmm: GMMModel | None = None) -> TimeVaryingLinearModel:
    """Fit every step of ``batch``.

    ``gmm`` may be a mixture fitted on a larger pool (e.g. all data collected
    so far); when omitted one is fitted on ``batch`` itself.
    """
    cfg = cfg or FitConfig()
    D = dataset_slices(batch)
    K, M, dim = D.shape
    if M < 2:
        raise FitError("need at least two trajectories")
    if gmm is None:
        gmm = fit_prior_gmm([batch], cfg)
    if cfg.prior_weights not in ("global", "step"):
        raise ValueError(f"unknown prior weighting {cfg.prior_weights!r}")
    n0 = dim + 2 if cfg.n0 is None else cfg.n0
    steps = []
    for k in range(K):
        w = gmm.responsibilities(D[k]).mean(axis=0) if cfg.prior_weights == "step" else None
        prior = build_niw_prior(gmm, n0, cfg.k0, weights=w)
        emp = empirical_moments(D[k])
        mean, cov = bayes_update(prior, emp, M, literal=cfg.bayes_update_literal)
        try:
            step = condition_gaussian(mean, cov)
        except FitError as exc:
            raise FitError(f"step {k}: {exc}") from exc
        if cfg.check_controllability and not is_controllable(step.Ad, step.Bd):
            raise FitError(f"step {k}: fitted (Ad, Bd) is not controllable")
        steps.append(step)
    diag = {"elbo_trace": list(map(float, gmm.elbo_trace)),
            "condition_numbers": [s.cond for s in steps],
            "gmm_components": gmm.n_components,
            "gmm_warnings": list(gmm.warnings)}
    return TimeVaryingLinearModel.from_steps(steps, diag)
