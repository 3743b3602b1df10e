"""Kalman filter and Rauch-Tung-Striebel smoother for the closed-loop model.

The chain has K transitions and K scalar observations, so there are K+1
latent states; the last one is never observed directly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .controller import ClosedLoopModel
from .dynamics import make_psd

LOG2PI = np.log(2 * np.pi)


class NumericalError(RuntimeError):
    pass


@dataclass
class FilterResult:
    pred_mean: np.ndarray   # (K+1, nx) x_{k|k-1}; row 0 is the prior
    pred_cov: np.ndarray
    filt_mean: np.ndarray   # (K+1, nx) x_{k|k}; last row equals its prediction
    filt_cov: np.ndarray
    loglik: float
    A: np.ndarray           # transitions, kept for the backward pass


@dataclass
class SmootherResult:
    filt_mean: np.ndarray
    filt_cov: np.ndarray
    mean: np.ndarray        # (K+1, nx) x_{k|K}
    cov: np.ndarray         # (K+1, nx, nx) P_{k|K}
    cross: np.ndarray       # (K, nx, nx) P_{k+1,k|K}
    loglik: float

    def second_moments(self):
        """``E[x_k x_k^T]`` and ``E[x_{k+1} x_k^T]`` under the smoothed posterior."""
        m = self.mean
        Exx = self.cov + np.einsum("ki,kj->kij", m, m)
        Exx1 = self.cross + np.einsum("ki,kj->kij", m[1:], m[:-1])
        return Exx, Exx1


def _checked_psd(P, what, k):
    P = make_psd(P)
    if not np.all(np.isfinite(P)):
        raise NumericalError(f"{what} at step {k} is not finite")
    return P


def kalman_filter(clm: ClosedLoopModel, y, prior_mean, prior_cov) -> FilterResult:
    y = np.asarray(y, dtype=float)
    K = clm.horizon
    if np.any(clm.R <= 0):
        raise NumericalError("observation variance must be positive")
    if len(y) != K:
        raise ValueError(f"expected {K} observations, got {len(y)}")
    nx = len(prior_mean)
    I = np.eye(nx)
    pm = np.empty((K + 1, nx))
    pP = np.empty((K + 1, nx, nx))
    fm = np.empty((K + 1, nx))
    fP = np.empty((K + 1, nx, nx))
    m = np.asarray(prior_mean, dtype=float)
    P = np.asarray(prior_cov, dtype=float)
    ll = 0.0
    for k in range(K):
        pm[k], pP[k] = m, P
        C = clm.C[k]
        s = float(C @ P @ C + clm.R[k])
        r = y[k] - C @ m - clm.d[k]
        ll += -0.5 * (LOG2PI + np.log(s) + r * r / s)
        gain = P @ C / s
        m = m + gain * r
        IKC = I - np.outer(gain, C)
        P = IKC @ P @ IKC.T + clm.R[k] * np.outer(gain, gain)
        P = _checked_psd(P, "filtered covariance", k)
        fm[k], fP[k] = m, P
        m = clm.A[k] @ m + clm.b[k]
        P = _checked_psd(clm.A[k] @ P @ clm.A[k].T + clm.Q[k], "predicted covariance", k)
    pm[K], pP[K] = m, P
    fm[K], fP[K] = m, P
    return FilterResult(pm, pP, fm, fP, float(ll), clm.A)


def rts_smoother(filt: FilterResult) -> SmootherResult:
    K = len(filt.A)
    ms = filt.filt_mean.copy()
    Ps = filt.filt_cov.copy()
    cross = np.empty((K,) + Ps.shape[1:])
    for k in range(K - 1, -1, -1):
        Ppred = filt.pred_cov[k + 1]
        J = np.linalg.solve(Ppred, filt.A[k] @ filt.filt_cov[k]).T
        ms[k] = filt.filt_mean[k] + J @ (ms[k + 1] - filt.pred_mean[k + 1])
        P = filt.filt_cov[k] + J @ (Ps[k + 1] - Ppred) @ J.T
        Ps[k] = 0.5 * (P + P.T)
        cross[k] = Ps[k + 1] @ J.T
    return SmootherResult(filt.filt_mean, filt.filt_cov, ms, Ps, cross, filt.loglik)


def smooth(clm: ClosedLoopModel, y, prior_mean, prior_cov) -> SmootherResult:
    return rts_smoother(kalman_filter(clm, y, prior_mean, prior_cov))


def loglik(clm: ClosedLoopModel, y, prior_mean, prior_cov) -> float:
    return kalman_filter(clm, y, prior_mean, prior_cov).loglik
