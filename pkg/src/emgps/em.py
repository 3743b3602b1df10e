"""EM trajectory optimisation of linear-Gaussian controllers.

The latent chain is the closed-loop state, the observations are cost
observations.  Each iteration smooths under the current controller, raises
the expected complete-data log-likelihood over the feedback/offset terms
with a guarded quasi-Newton ascent, and contracts the controller covariances
through the covariance block of the information matrix.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from .controller import ClosedLoopModel, ControllerParams, closed_loop
from .dynamics import TimeVaryingLinearModel
from .smoother import LOG2PI, SmootherResult, kalman_filter, rts_smoother
from .sim import CostModel

log = logging.getLogger(__name__)

SIGMA_FLOOR = 1e-8


class InformationBoundError(RuntimeError):
    pass


@dataclass
class EMOptions:
    grad_step: float = 1e-5           # relative, central differences
    hess_step: float = 1e-3
    max_iter: int = 200               # quasi-Newton iterations per M-step
    gtol: float = 1e-8
    curvature: str = "fisher"         # "fisher" or "observed"
    full_matrix: bool = False         # observed-data curvature across steps
    bound_tol: float = 1e-6
    observation: str = "target"       # "target" or "empirical"


@dataclass
class EmIterationRecord:
    """Diagnostics of one EM iteration.

    ``surrogate_cost`` is the model-based expected cost-to-go of the
    controller at the start of the iteration; the exact sum of expected
    running costs is not available without the true dynamics.
    """

    iteration: int
    theta: np.ndarray
    q_prev: float        # L(theta_i, theta_i)
    q_mstep: float       # L((f, e)_{i+1}, sigma_i; theta_i), the guarded quantity
    q_next: float        # L(theta_{i+1}, theta_i) after the covariance update
    loglik: float        # L_theta_i(Y)
    surrogate_cost: float
    trace_sigma: float
    info_eigs: np.ndarray = field(default_factory=lambda: np.zeros(0))
    no_progress: bool = False


def observation_sequence(policy: str, horizon: int, batch_y=None) -> np.ndarray:
    if policy == "target":
        return np.ones(horizon)
    if policy == "empirical":
        if batch_y is None:
            raise ValueError("empirical observation policy needs batch cost observations")
        return np.asarray(batch_y, dtype=float).mean(axis=0)
    raise ValueError(f"unknown observation policy {policy!r}")


# ---------------------------------------------------------------------------
# expected complete-data log-likelihood
# ---------------------------------------------------------------------------

def _gauss_expect(V, E_rr):
    """``E[log N(r; 0, V)]`` given ``E[r r^T]``, vectorised over the leading axis."""
    n = V.shape[-1]
    L = np.linalg.cholesky(V)
    logdet = 2 * np.log(np.diagonal(L, axis1=-2, axis2=-1)).sum(-1)
    tr = np.einsum("...ii->...", np.linalg.solve(V, E_rr))
    return -0.5 * (n * LOG2PI + logdet + tr)


def q_terms(clm: ClosedLoopModel, sm: SmootherResult, y) -> np.ndarray:
    """Per-step transition + observation terms of the Q-function, shape ``(K,)``."""
    Exx, Exx1 = sm.second_moments()
    m = sm.mean
    A, b = clm.A, clm.b
    K = clm.horizon
    Ex0, Ex1 = Exx[:K], Exx[1:]
    m0, m1 = m[:K], m[1:]
    AE = A @ Exx1.transpose(0, 2, 1)                  # A E[x x'^T]
    E_rr = (Ex1 - AE.transpose(0, 2, 1) - AE + A @ Ex0 @ A.transpose(0, 2, 1)
            - np.einsum("ki,kj->kij", m1 - np.einsum("kij,kj->ki", A, m0), b)
            - np.einsum("ki,kj->kij", b, m1 - np.einsum("kij,kj->ki", A, m0))
            + np.einsum("ki,kj->kij", b, b))
    trans = _gauss_expect(clm.Q, 0.5 * (E_rr + E_rr.transpose(0, 2, 1)))
    yd = np.asarray(y, dtype=float) - clm.d
    E_v2 = yd ** 2 - 2 * yd * np.einsum("ki,ki->k", clm.C, m0) + np.einsum("ki,kij,kj->k", clm.C, Ex0, clm.C)
    obs = -0.5 * (LOG2PI + np.log(clm.R) + E_v2 / clm.R)
    return trans + obs


def initial_term(sm: SmootherResult, prior_mean, prior_cov) -> float:
    d = sm.mean[0] - prior_mean
    E = sm.cov[0] + np.outer(d, d)
    return float(_gauss_expect(np.asarray(prior_cov)[None], E[None])[0])


def q_function(theta: ControllerParams, sm: SmootherResult, model: TimeVaryingLinearModel, y,
               prior_mean=None, prior_cov=None) -> float:
    """``E_{theta_i}[log p_theta(X, Y) | Y]`` from the smoothed moments of ``theta_i``."""
    if len(sm.mean) != model.horizon + 1:
        raise ValueError("smoother result and model horizons disagree")
    total = float(q_terms(closed_loop(model, theta), sm, y).sum())
    if prior_mean is not None:
        total += initial_term(sm, prior_mean, prior_cov)
    return total


# ---------------------------------------------------------------------------
# M-step
# ---------------------------------------------------------------------------

def _fe_gradient(theta, sm, model, y, rel):
    """Central-difference gradient of the per-step terms w.r.t. ``[vec F_k, e_k]``.

    The Q-function separates over steps, so one perturbation of component
    ``j`` applied to every step at once yields column ``j`` for all steps.
    """
    fe = theta.fe_vector()
    K, n = fe.shape
    g = np.empty_like(fe)
    for j in range(n):
        h = rel * np.maximum(1.0, np.abs(fe[:, j]))
        up = fe.copy()
        dn = fe.copy()
        up[:, j] += h
        dn[:, j] -= h
        qp = q_terms(closed_loop(model, theta.with_fe(up)), sm, y)
        qm = q_terms(closed_loop(model, theta.with_fe(dn)), sm, y)
        g[:, j] = (qp - qm) / (2 * h)
    return g


def m_step(theta: ControllerParams, sm: SmootherResult, model: TimeVaryingLinearModel, y,
           opts: EMOptions | None = None):
    """Raise ``L(., theta_i)`` over the feedback/offset components.

    Returns ``(theta_next, no_progress)``; ``theta_next`` is never worse than
    the start point.
    """
    opts = opts or EMOptions()
    K, n = theta.fe_vector().shape
    x0 = theta.fe_vector().ravel()
    bnd = theta.bound_fe
    x0 = np.clip(x0, -bnd, bnd)
    start = theta.with_fe(x0)

    def fun(x):
        th = start.with_fe(x)
        return -float(q_terms(closed_loop(model, th), sm, y).sum())

    def jac(x):
        return -_fe_gradient(start.with_fe(x), sm, model, y, opts.grad_step).ravel()

    f0 = fun(x0)
    g0 = jac(x0)
    if np.linalg.norm(g0) < opts.gtol:
        return start, True
    try:
        res = minimize(fun, x0, jac=jac, method="L-BFGS-B", bounds=[(-bnd, bnd)] * len(x0),
                       options={"maxiter": opts.max_iter, "gtol": opts.gtol, "ftol": 1e-15})
        x1, f1 = res.x, res.fun
    except (np.linalg.LinAlgError, ValueError) as exc:
        log.warning("M-step optimiser failed: %s", exc)
        return start, True
    if not np.isfinite(f1) or f1 > f0:
        return start, True
    return start.with_fe(x1), False


# ---------------------------------------------------------------------------
# information matrix and covariance update
# ---------------------------------------------------------------------------

def information_from_curvatures(complete, observed, symmetric: bool = False):
    """``I - complete^{-1} observed`` for negated Hessians (information matrices).

    With ``symmetric=True`` the same spectrum is returned in the whitened
    form ``I - complete^{-1/2} observed complete^{-1/2}``; directions in the
    null space of ``complete`` map to the identity.
    """
    complete = np.atleast_2d(np.asarray(complete, dtype=float))
    observed = np.atleast_2d(np.asarray(observed, dtype=float))
    n = len(complete)
    if not symmetric:
        return np.eye(n) - np.linalg.pinv(complete) @ observed
    w, V = np.linalg.eigh(0.5 * (complete + complete.T))
    cut = 1e-12 * max(abs(w).max(), 1e-300)
    inv_sqrt = np.where(w > cut, 1.0 / np.sqrt(np.where(w > cut, w, 1.0)), 0.0)
    Wh = (V * inv_sqrt) @ V.T
    M = Wh @ (0.5 * (observed + observed.T)) @ Wh
    return np.eye(n) - 0.5 * (M + M.T)


def _sigma_derivs(sqrt):
    """``d Sigma / d vec(S)`` for ``Sigma = S^T S``; shape ``(K, nu*nu, nu, nu)``."""
    K, nu, _ = sqrt.shape
    out = np.empty((K, nu * nu, nu, nu))
    for j in range(nu * nu):
        E = np.zeros((nu, nu))
        E[j % nu, j // nu] = 1.0
        out[:, j] = np.einsum("ji,kjl->kil", E, sqrt) + np.einsum("kji,jl->kil", sqrt, E)
    return out


def complete_fisher_sigma(theta: ControllerParams, model: TimeVaryingLinearModel):
    """Per-step complete-data Fisher information of ``vec(S_k)``, ``(K, p, p)``."""
    clm = closed_loop(model, theta)
    dS = _sigma_derivs(theta.sqrt)
    dQ = np.einsum("kab,kjbc,kdc->kjad", model.Bd, dS, model.Bd)
    dR = np.einsum("ka,kjab,kb->kj", model.By, dS, model.By)
    Qi_dQ = np.einsum("kab,kjbc->kjac", np.linalg.inv(clm.Q), dQ)
    info = 0.5 * np.einsum("kjab,klba->kjl", Qi_dQ, Qi_dQ)
    info += 0.5 * np.einsum("kj,kl->kjl", dR, dR) / (clm.R ** 2)[:, None, None]
    return info


def _noise_maps(clm: ClosedLoopModel):
    """``G[k]`` maps the process noise entering ``x_{k+1}`` to the observation sequence."""
    K, nx = clm.horizon, clm.A.shape[1]
    G = np.zeros((K, K, nx))
    for k in range(K):
        Phi = np.eye(nx)
        for t in range(k + 1, K):
            G[k, t] = clm.C[t] @ Phi
            Phi = clm.A[t] @ Phi
    return G


def observation_covariance(clm: ClosedLoopModel, prior_cov) -> np.ndarray:
    """Covariance of the cost-observation sequence under the closed loop."""
    K, nx = clm.horizon, clm.A.shape[1]
    G = _noise_maps(clm)
    G0 = np.zeros((K, nx))
    Phi = np.eye(nx)
    for t in range(K):
        G0[t] = clm.C[t] @ Phi
        Phi = clm.A[t] @ Phi
    S = G0 @ prior_cov @ G0.T + np.einsum("kti,kij,ksj->ts", G, clm.Q, G) + np.diag(clm.R)
    return 0.5 * (S + S.T)


def observed_fisher_sigma(theta: ControllerParams, model: TimeVaryingLinearModel, prior_cov):
    """Fisher information of ``vec(S_k)`` carried by the cost observations alone.

    Returns the full ``(K*p, K*p)`` matrix.  The observation mean does not
    depend on the covariance parameters, so only the covariance term appears.
    """
    clm = closed_loop(model, theta)
    K = clm.horizon
    p = theta.n_sigma
    dS = _sigma_derivs(theta.sqrt)
    dQ = np.einsum("kab,kjbc,kdc->kjad", model.Bd, dS, model.Bd)
    dR = np.einsum("ka,kjab,kb->kj", model.By, dS, model.By)
    G = _noise_maps(clm)
    Sy = observation_covariance(clm, prior_cov)
    dSy = np.einsum("kta,kjab,ksb->kjts", G, dQ, G)
    idx = np.arange(K)
    dSy[idx, :, idx, idx] += dR
    Si_dS = np.linalg.solve(Sy[None, None], dSy).reshape(K * p, K, K)
    return 0.5 * np.einsum("ats,bst->ab", Si_dS, Si_dS)


def _fd_hessian_blocks(f_terms, rows, idx, h):
    """Per-step Hessian blocks of a step-separable objective by central differences."""
    K = rows.shape[0]
    n = len(idx)
    H = np.empty((K, n, n))

    def ev(di, dj, si, sj):
        r = rows.copy()
        r[:, idx[di]] += si * h[:, di]
        r[:, idx[dj]] += sj * h[:, dj]
        return f_terms(r)

    for a in range(n):
        for b in range(a, n):
            val = (ev(a, b, 1, 1) - ev(a, b, 1, -1) - ev(a, b, -1, 1) + ev(a, b, -1, -1))
            H[:, a, b] = H[:, b, a] = val / (4 * h[:, a] * h[:, b])
    return H


def _observed_curvatures(theta_i, theta_next, model, y, prior_mean, prior_cov, sm, opts):
    """Literal finite-difference Hessians over each step's full ``theta_k`` block."""
    K = theta_i.horizon
    nfe = theta_i.n_fe
    ntot = nfe + theta_i.n_sigma

    def rows_of(th):
        return np.hstack([th.fe_vector(), th.sigma_vector()])

    def from_rows(r):
        return theta_i.with_fe(r[:, :nfe]).with_sigma(r[:, nfe:])

    rows_next = rows_of(theta_next)
    h_next = opts.hess_step * np.maximum(1.0, np.abs(rows_next))
    idx = list(range(ntot))
    Hq = _fd_hessian_blocks(lambda r: q_terms(closed_loop(model, from_rows(r)), sm, y),
                            rows_next, idx, h_next)

    rows_i = rows_of(theta_i)
    h_i = opts.hess_step * np.maximum(1.0, np.abs(rows_i))
    HL = np.empty((K, ntot, ntot))

    def ll(r):
        return kalman_filter(closed_loop(model, from_rows(r)), y, prior_mean, prior_cov).loglik

    for k in range(K):
        for a in range(ntot):
            for b in range(a, ntot):
                vals = []
                for sa, sb in ((1, 1), (1, -1), (-1, 1), (-1, -1)):
                    r = rows_i.copy()
                    r[k, a] += sa * h_i[k, a]
                    r[k, b] += sb * h_i[k, b]
                    vals.append(ll(r))
                HL[k, a, b] = HL[k, b, a] = (vals[0] - vals[1] - vals[2] + vals[3]) / (4 * h_i[k, a] * h_i[k, b])
    return -Hq, -HL


@dataclass
class InformationMatrix:
    blocks: np.ndarray         # per-step full blocks (or sigma blocks in fisher mode)
    sigma_blocks: np.ndarray   # (K, p, p) covariance minor
    eigenvalues: np.ndarray    # (K, p)


def information_matrix(theta_i: ControllerParams, theta_next: ControllerParams,
                       model: TimeVaryingLinearModel, y, prior_mean, prior_cov,
                       sm: SmootherResult | None = None, opts: EMOptions | None = None) -> InformationMatrix:
    opts = opts or EMOptions()
    K, p = theta_i.horizon, theta_i.n_sigma
    tol = opts.bound_tol
    if opts.curvature == "fisher":
        Jc = complete_fisher_sigma(theta_next, model)
        Jo_full = observed_fisher_sigma(theta_i, model, prior_cov)
        blocks = np.empty((K, p, p))
        for k in range(K):
            Jo = Jo_full[k * p:(k + 1) * p, k * p:(k + 1) * p]
            blocks[k] = information_from_curvatures(Jc[k], Jo, symmetric=True)
        sig = blocks
    elif opts.curvature == "observed":
        if sm is None:
            sm = rts_smoother(kalman_filter(closed_loop(model, theta_i), y, prior_mean, prior_cov))
        Jc, Jo = _observed_curvatures(theta_i, theta_next, model, y, prior_mean, prior_cov, sm, opts)
        n = Jc.shape[1]
        blocks = np.stack([information_from_curvatures(Jc[k], Jo[k]) for k in range(K)])
        sig = blocks[:, n - p:, n - p:]
    else:
        raise ValueError(f"unknown curvature mode {opts.curvature!r}")

    eigs = np.empty((K, p))
    out = np.empty_like(sig)
    for k in range(K):
        ev = np.linalg.eigvals(sig[k])
        ev = np.real_if_close(ev, tol=1e6)
        if np.iscomplexobj(ev) or ev.min() < -tol or ev.max() > 1 + tol:
            raise InformationBoundError(
                f"step {k}: information-matrix covariance minor has eigenvalues "
                f"outside [0, 1]: {np.round(ev, 8)}")
        eigs[k] = np.sort(ev)
        if opts.curvature == "fisher":
            w, V = np.linalg.eigh(sig[k])
            out[k] = (V * np.clip(w, 0.0, 1.0)) @ V.T
        else:
            out[k] = sig[k]
    return InformationMatrix(blocks, out, eigs)


def covariance_update(theta: ControllerParams, info_sigma) -> ControllerParams:
    """Apply ``sigma_{i+1} = I_Sigma sigma_i`` step by step with a PD floor."""
    sig = theta.sigma_vector()
    new = np.einsum("kij,kj->ki", np.asarray(info_sigma), sig)
    out = theta.with_sigma(new)
    cov = out.cov
    w, V = np.linalg.eigh(cov)
    if np.any(w < SIGMA_FLOOR):
        w = np.maximum(w, SIGMA_FLOOR)
        cov = np.einsum("kij,kj,klj->kil", V, w, V)
        S = np.linalg.cholesky(0.5 * (cov + cov.transpose(0, 2, 1))).transpose(0, 2, 1)
        bad = np.any(np.linalg.eigvalsh(out.cov) < SIGMA_FLOOR, axis=1)
        sqrt = out.sqrt.copy()
        sqrt[bad] = S[bad]
        out = ControllerParams(out.F, out.e, sqrt, out.bound_fe, out.max_singular)
    return out


# ---------------------------------------------------------------------------
# surrogate cost and the EM loop
# ---------------------------------------------------------------------------

def surrogate_cost(model: TimeVaryingLinearModel, theta: ControllerParams, cm: CostModel,
                   prior_mean, prior_cov) -> float:
    """Expected cost-to-go of the controller under the fitted model."""
    clm = closed_loop(model, theta)
    m = np.asarray(prior_mean, dtype=float)
    P = np.asarray(prior_cov, dtype=float)
    Sig = theta.cov
    total = 0.0
    for k in range(model.horizon):
        dx = m - cm.target_state
        total += float(dx @ cm.Qx @ dx + np.trace(cm.Qx @ P))
        um = theta.F[k] @ m + theta.e[k]
        du = um - cm.target_action
        Pu = theta.F[k] @ P @ theta.F[k].T + Sig[k]
        total += float(du @ cm.Qu @ du + np.trace(cm.Qu @ Pu))
        m = clm.A[k] @ m + clm.b[k]
        P = clm.A[k] @ P @ clm.A[k].T + clm.Q[k]
    return total


def em_iteration(model, theta, y, prior_mean, prior_cov, cm=None, opts=None, iteration=0):
    opts = opts or EMOptions()
    clm = closed_loop(model, theta)
    filt = kalman_filter(clm, y, prior_mean, prior_cov)
    sm = rts_smoother(filt)
    q_prev = q_function(theta, sm, model, y, prior_mean, prior_cov)
    cand, no_progress = m_step(theta, sm, model, y, opts)
    q_mstep = q_function(cand, sm, model, y, prior_mean, prior_cov)
    info = information_matrix(theta, cand, model, y, prior_mean, prior_cov, sm=sm, opts=opts)
    nxt = covariance_update(cand, info.sigma_blocks)
    q_next = q_function(nxt, sm, model, y, prior_mean, prior_cov)
    V = surrogate_cost(model, theta, cm, prior_mean, prior_cov) if cm is not None else float("nan")
    rec = EmIterationRecord(
        iteration=iteration, theta=theta.theta(), q_prev=q_prev, q_mstep=q_mstep, q_next=q_next,
        loglik=filt.loglik, surrogate_cost=V, trace_sigma=float(np.trace(theta.cov, axis1=1, axis2=2).sum()),
        info_eigs=info.eigenvalues, no_progress=no_progress)
    return nxt, rec


def em_optimize(model: TimeVaryingLinearModel, theta0: ControllerParams, y, prior_mean, prior_cov,
                iters: int = 9, cm: CostModel | None = None, opts: EMOptions | None = None,
                records: list | None = None):
    """Run ``iters`` EM iterations; returns ``(records, theta_final)``.

    ``records`` may be passed in to keep partial diagnostics if a later
    iteration raises.
    """
    if iters < 1:
        raise ValueError("need at least one EM iteration")
    records = [] if records is None else records
    theta = theta0
    for i in range(iters):
        theta, rec = em_iteration(model, theta, y, prior_mean, prior_cov, cm, opts, iteration=i)
        records.append(rec)
    return records, theta
