"""Linear-Gaussian feedback controllers and the closed-loop state-space model."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dynamics import TimeVaryingLinearModel
from .sim import CostModel


class RiccatiError(RuntimeError):
    pass


@dataclass
class ControllerParams:
    """Per-step ``u ~ N(F_k x + e_k, Sigma_k)`` with ``Sigma_k = S_k^T S_k``.

    ``sqrt`` holds ``S_k``; the parameter vector of step ``k`` is
    ``[vec F_k, e_k, vec S_k]`` with column-major ``vec``.
    """

    F: np.ndarray      # (K, nu, nx)
    e: np.ndarray      # (K, nu)
    sqrt: np.ndarray   # (K, nu, nu)
    bound_fe: float = 1e3
    max_singular: float = 10.0

    @property
    def horizon(self) -> int:
        return len(self.F)

    @property
    def nx(self) -> int:
        return self.F.shape[2]

    @property
    def nu(self) -> int:
        return self.F.shape[1]

    @property
    def cov(self) -> np.ndarray:
        S = self.sqrt
        C = np.einsum("kji,kjl->kil", S, S)
        return 0.5 * (C + C.transpose(0, 2, 1))

    @classmethod
    def from_cov(cls, F, e, cov, **kw):
        cov = np.asarray(cov, dtype=float)
        S = np.linalg.cholesky(cov).transpose(0, 2, 1)
        return cls(np.asarray(F, dtype=float), np.asarray(e, dtype=float), S, **kw)

    def copy(self):
        return ControllerParams(self.F.copy(), self.e.copy(), self.sqrt.copy(),
                                self.bound_fe, self.max_singular)

    # vectorisation -------------------------------------------------------
    @property
    def n_fe(self) -> int:
        return self.nu * self.nx + self.nu

    @property
    def n_sigma(self) -> int:
        return self.nu * self.nu

    def fe_vector(self) -> np.ndarray:
        """``(K, nu*nx + nu)`` array of ``[vec F_k, e_k]`` rows."""
        K = self.horizon
        vecF = self.F.transpose(0, 2, 1).reshape(K, -1)
        return np.hstack([vecF, self.e])

    def with_fe(self, fe) -> "ControllerParams":
        fe = np.asarray(fe, dtype=float).reshape(self.horizon, self.n_fe)
        nxu = self.nu * self.nx
        F = fe[:, :nxu].reshape(self.horizon, self.nx, self.nu).transpose(0, 2, 1)
        return ControllerParams(F.copy(), fe[:, nxu:].copy(), self.sqrt.copy(),
                                self.bound_fe, self.max_singular)

    def sigma_vector(self) -> np.ndarray:
        """``(K, nu*nu)`` rows of ``vec S_k``."""
        return self.sqrt.transpose(0, 2, 1).reshape(self.horizon, -1)

    def with_sigma(self, sig) -> "ControllerParams":
        sig = np.asarray(sig, dtype=float).reshape(self.horizon, self.n_sigma)
        S = sig.reshape(self.horizon, self.nu, self.nu).transpose(0, 2, 1)
        return ControllerParams(self.F.copy(), self.e.copy(), S.copy(),
                                self.bound_fe, self.max_singular)

    def theta(self) -> np.ndarray:
        """Full stacked parameter ``col(theta_1, ..., theta_K)``."""
        return np.hstack([self.fe_vector(), self.sigma_vector()]).ravel()

    @classmethod
    def from_theta(cls, theta, nx, nu, **kw):
        K = len(theta) // (nu * nx + nu + nu * nu)
        rows = np.asarray(theta, dtype=float).reshape(K, -1)
        nfe = nu * nx + nu
        tmpl = cls(np.zeros((K, nu, nx)), np.zeros((K, nu)), np.zeros((K, nu, nu)), **kw)
        return tmpl.with_fe(rows[:, :nfe]).with_sigma(rows[:, nfe:])

    def in_bounds(self) -> bool:
        fe_ok = np.all(np.abs(self.fe_vector()) <= self.bound_fe)
        sv = np.linalg.svd(self.sqrt, compute_uv=False)
        return bool(fe_ok and np.all(sv <= self.max_singular + 1e-12))


@dataclass
class ClosedLoopModel:
    """``x' = A x + b + w, w~N(0,Q)``; ``y = C x + d + v, v~N(0,R)`` per step."""

    A: np.ndarray   # (K, nx, nx)
    b: np.ndarray   # (K, nx)
    Q: np.ndarray   # (K, nx, nx)
    C: np.ndarray   # (K, nx)
    d: np.ndarray   # (K,)
    R: np.ndarray   # (K,)

    @property
    def horizon(self) -> int:
        return len(self.A)


def closed_loop(model: TimeVaryingLinearModel, theta: ControllerParams) -> ClosedLoopModel:
    if theta.horizon != model.horizon or theta.nx != model.nx or theta.nu != model.nu:
        raise ValueError("controller and model dimensions disagree")
    Bd, By, Sig = model.Bd, model.By, theta.cov
    A = model.Ad + Bd @ theta.F
    b = np.einsum("kij,kj->ki", Bd, theta.e) + model.cd
    Q = model.Sd + Bd @ Sig @ Bd.transpose(0, 2, 1)
    C = model.Ay + np.einsum("kj,kji->ki", By, theta.F)
    d = np.einsum("kj,kj->k", By, theta.e) + model.cy
    R = model.Sy + np.einsum("ki,kij,kj->k", By, Sig, By)
    return ClosedLoopModel(A, b, 0.5 * (Q + Q.transpose(0, 2, 1)), C, d, R)


def lqr_gains(A, B, c, Qx, Qu, x_target, u_target):
    """Finite-horizon affine LQR with terminal weight ``Qx``.

    Minimises ``sum_k |x_k - x*|_Qx^2 + |u_k - u*|_Qu^2 + |x_{K+1} - x*|_Qx^2``
    for ``x_{k+1} = A_k x_k + B_k u_k + c_k``; returns ``(F, e)``.
    """
    K, nx, nu = B.shape
    P = Qx.copy()
    p = -Qx @ x_target
    F = np.zeros((K, nu, nx))
    e = np.zeros((K, nu))
    for k in range(K - 1, -1, -1):
        Pc = P @ c[k] + p
        Quu = Qu + B[k].T @ P @ B[k]
        Qux = B[k].T @ P @ A[k]
        qu = -Qu @ u_target + B[k].T @ Pc
        Quu = 0.5 * (Quu + Quu.T)
        F[k] = -np.linalg.solve(Quu, Qux)
        e[k] = -np.linalg.solve(Quu, qu)
        if not (np.all(np.isfinite(F[k])) and np.all(np.isfinite(e[k]))):
            raise RiccatiError(f"non-finite gain at step {k}")
        Qxx = Qx + A[k].T @ P @ A[k]
        qx = -Qx @ x_target + A[k].T @ Pc
        P = Qxx + Qux.T @ F[k]
        P = 0.5 * (P + P.T)
        p = qx + Qux.T @ e[k]
    return F, e


def init_controller_lqr(model: TimeVaryingLinearModel, cm: CostModel, init_cov: float = 1.0,
                        **kw) -> ControllerParams:
    F, e = lqr_gains(model.Ad, model.Bd, model.cd, cm.Qx, cm.Qu,
                     cm.target_state, cm.target_action)
    K, nu = e.shape
    S = np.tile(np.sqrt(init_cov) * np.eye(nu), (K, 1, 1))
    return ControllerParams(F, e, S, **kw)
