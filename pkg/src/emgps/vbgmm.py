"""Variational-Bayes Gaussian mixture with Dirichlet / Normal-Wishart priors.

Coordinate ascent on the evidence lower bound; the bound is evaluated after
every M-step, so the recorded trace is non-decreasing up to round-off.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import digamma, gammaln, logsumexp

log = logging.getLogger(__name__)


@dataclass
class GMMModel:
    weights: np.ndarray          # (F,)
    means: np.ndarray            # (F, D)
    covs: np.ndarray             # (F, D, D), E[Lambda]^-1
    alpha: np.ndarray            # Dirichlet concentrations
    beta: np.ndarray
    nu: np.ndarray
    m: np.ndarray
    W: np.ndarray
    elbo_trace: list = field(default_factory=list)
    warnings: list = field(default_factory=list)
    converged: bool = False

    @property
    def n_components(self) -> int:
        return len(self.weights)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def expected_log_density(self, X):
        """``E_q[ln pi_f + ln N(x | mu_f, Lambda_f)]`` for every row and component."""
        X = np.atleast_2d(X)
        D = self.dim
        ln_pi = digamma(self.alpha) - digamma(self.alpha.sum())
        ln_lam = _expected_logdet(self.W, self.nu)
        diff = X[:, None, :] - self.m[None, :, :]
        maha = np.einsum("nfi,fij,nfj->nf", diff, self.W, diff)
        quad = D / self.beta + self.nu * maha
        return ln_pi + 0.5 * ln_lam - 0.5 * D * np.log(2 * np.pi) - 0.5 * quad

    def responsibilities(self, X):
        lr = self.expected_log_density(X)
        return np.exp(lr - logsumexp(lr, axis=1, keepdims=True))


def _expected_logdet(W, nu):
    D = W.shape[-1]
    i = np.arange(1, D + 1)
    _, logdet = np.linalg.slogdet(W)
    return digamma(0.5 * (nu[:, None] + 1 - i)).sum(axis=1) + D * np.log(2.0) + logdet


def _log_wishart_norm(W, nu):
    """ln B(W, nu) of the Wishart normaliser, vectorised over leading axis."""
    D = W.shape[-1]
    i = np.arange(1, D + 1)
    _, logdet = np.linalg.slogdet(W)
    return (-0.5 * nu * logdet
            - (0.5 * nu * D * np.log(2.0) + 0.25 * D * (D - 1) * np.log(np.pi)
               + gammaln(0.5 * (np.asarray(nu)[..., None] + 1 - i)).sum(axis=-1)))


def _log_dirichlet_norm(alpha):
    return gammaln(alpha.sum()) - gammaln(alpha).sum()


class _Prior:
    def __init__(self, X, F, alpha0, beta0, nu0, scale, reg):
        D = X.shape[1]
        self.alpha0 = float(alpha0)
        self.beta0 = float(beta0)
        self.nu0 = float(D + 2 if nu0 is None else nu0)
        self.m0 = X.mean(axis=0)
        cov = np.cov(X, rowvar=False, bias=True).reshape(D, D) + reg * np.eye(D)
        self.W0_inv = self.nu0 * scale * cov
        self.W0 = np.linalg.inv(self.W0_inv)


def _m_step(X, R, prior, reg):
    D = X.shape[1]
    Nk = R.sum(axis=0) + 1e-12
    xbar = (R.T @ X) / Nk[:, None]
    diff = X[:, None, :] - xbar[None, :, :]
    S = np.einsum("nf,nfi,nfj->fij", R, diff, diff) / Nk[:, None, None]
    alpha = prior.alpha0 + Nk
    beta = prior.beta0 + Nk
    nu = prior.nu0 + Nk
    m = (prior.beta0 * prior.m0 + Nk[:, None] * xbar) / beta[:, None]
    dm = xbar - prior.m0
    coef = prior.beta0 * Nk / (prior.beta0 + Nk)
    W_inv = (prior.W0_inv[None] + Nk[:, None, None] * S
             + coef[:, None, None] * np.einsum("fi,fj->fij", dm, dm))
    W_inv = 0.5 * (W_inv + W_inv.transpose(0, 2, 1)) + reg * np.eye(D)
    W = np.linalg.inv(W_inv)
    return Nk, xbar, S, alpha, beta, nu, m, W


def _elbo(X, R, stats, prior):
    Nk, xbar, S, alpha, beta, nu, m, W = stats
    D = X.shape[1]
    F = len(Nk)
    ln_lam = _expected_logdet(W, nu)
    ln_pi = digamma(alpha) - digamma(alpha.sum())
    dxm = xbar - m
    tr_SW = np.einsum("fij,fji->f", S, W)
    e_px = 0.5 * np.sum(Nk * (ln_lam - D / beta - nu * tr_SW
                              - nu * np.einsum("fi,fij,fj->f", dxm, W, dxm)
                              - D * np.log(2 * np.pi)))
    e_pz = np.sum(R * ln_pi[None, :])
    e_ppi = _log_dirichlet_norm(np.full(F, prior.alpha0)) + (prior.alpha0 - 1) * ln_pi.sum()
    dm0 = m - prior.m0
    e_pmu = (0.5 * np.sum(D * np.log(prior.beta0 / (2 * np.pi)) + ln_lam - D * prior.beta0 / beta
                          - prior.beta0 * nu * np.einsum("fi,fij,fj->f", dm0, W, dm0))
             + F * _log_wishart_norm(prior.W0, prior.nu0)
             + 0.5 * (prior.nu0 - D - 1) * ln_lam.sum()
             - 0.5 * np.sum(nu * np.einsum("ij,fji->f", prior.W0_inv, W)))
    Rpos = R[R > 0]
    e_qz = np.sum(Rpos * np.log(Rpos))
    e_qpi = np.sum((alpha - 1) * ln_pi) + _log_dirichlet_norm(alpha)
    entropy_wishart = (-_log_wishart_norm(W, nu) - 0.5 * (nu - D - 1) * ln_lam + 0.5 * nu * D)
    e_qmu = np.sum(0.5 * ln_lam + 0.5 * D * np.log(beta / (2 * np.pi)) - 0.5 * D - entropy_wishart)
    return float(e_px + e_pz + e_ppi + e_pmu - e_qz - e_qpi - e_qmu)


def _init_assign(X, F, rng):
    """k-means++ seeding on standardised data, then nearest-centre hard assignment."""
    s = X.std(axis=0)
    s[s < 1e-12] = 1.0
    Z = (X - X.mean(axis=0)) / s
    centers = [Z[rng.integers(len(Z))]]
    for _ in range(1, F):
        d2 = np.min([((Z - c) ** 2).sum(axis=1) for c in centers], axis=0)
        total = d2.sum()
        if total <= 0:
            centers.append(Z[rng.integers(len(Z))])
        else:
            centers.append(Z[rng.choice(len(Z), p=d2 / total)])
    C = np.array(centers)
    labels = np.argmin(((Z[:, None, :] - C[None]) ** 2).sum(axis=2), axis=1)
    R = np.zeros((len(X), F))
    R[np.arange(len(X)), labels] = 1.0
    return R


def fit_gmm_vb(X, n_components: int = 8, max_iter: int = 100, tol: float = 1e-6,
               seed: int = 0, alpha0: float = 1.0, beta0: float = 1.0, nu0=None,
               prior_scale: float = 0.1, reg: float = 1e-6, prune_mass: float = 1e-3) -> GMMModel:
    """Fit a VB-GMM to the rows of ``X``.

    Components whose total responsibility mass falls below ``prune_mass`` at
    convergence are dropped and the weights renormalised.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim != 2:
        raise ValueError("X must be 2-D")
    if n_components < 1:
        raise ValueError("need at least one component")
    if len(X) < n_components:
        raise ValueError(f"{len(X)} samples cannot support {n_components} components")
    rng = np.random.default_rng(seed)
    prior = _Prior(X, n_components, alpha0, beta0, nu0, prior_scale, reg)

    R = _init_assign(X, n_components, rng)
    stats = _m_step(X, R, prior, reg)
    trace = [_elbo(X, R, stats, prior)]
    converged = False
    for _ in range(max_iter):
        model = _as_model(stats)
        R = model.responsibilities(X)
        stats = _m_step(X, R, prior, reg)
        trace.append(_elbo(X, R, stats, prior))
        if abs(trace[-1] - trace[-2]) < tol * max(1.0, abs(trace[-2])):
            converged = True
            break

    model = _as_model(stats)
    model.elbo_trace = trace
    model.converged = converged
    keep = stats[0] >= prune_mass
    if not keep.all():
        msg = f"pruned {int((~keep).sum())} degenerate component(s) with mass < {prune_mass}"
        log.warning(msg)
        model = _subset(model, keep)
        model.warnings.append(msg)
    return model


def _as_model(stats):
    Nk, xbar, S, alpha, beta, nu, m, W = stats
    covs = np.linalg.inv(W) / nu[:, None, None]
    covs = 0.5 * (covs + covs.transpose(0, 2, 1))
    return GMMModel(weights=alpha / alpha.sum(), means=m.copy(), covs=covs,
                    alpha=alpha, beta=beta, nu=nu, m=m, W=W)


def _subset(model, keep):
    alpha = model.alpha[keep]
    return GMMModel(weights=alpha / alpha.sum(), means=model.means[keep], covs=model.covs[keep],
                    alpha=alpha, beta=model.beta[keep], nu=model.nu[keep], m=model.m[keep],
                    W=model.W[keep], elbo_trace=model.elbo_trace, warnings=list(model.warnings),
                    converged=model.converged)
