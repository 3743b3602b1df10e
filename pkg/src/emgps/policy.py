"""Global Gaussian policy: MLP mean trained by KL-weighted regression.

The network is plain numpy (affine -> ReLU -> affine -> ReLU -> affine) with
hand-written reverse mode and Adam.  Inputs are standardised with statistics
taken from the training set and stored alongside the weights.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .controller import ControllerParams
from .sim import Trajectory


class TrainingError(RuntimeError):
    pass


@dataclass
class AdamConfig:
    step: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class TrainConfig:
    epochs: int = 4000
    minibatch: int = 25
    batches_per_epoch: int = 50
    adam: AdamConfig = field(default_factory=AdamConfig)
    warm_start: bool = True
    seed: int = 0


class PolicyNet:
    """Fully connected ReLU network; ``weights[l]`` has shape ``(fan_out, fan_in)``."""

    def __init__(self, weights, biases, in_mean=None, in_std=None):
        self.weights = [np.asarray(W, dtype=float) for W in weights]
        self.biases = [np.asarray(b, dtype=float) for b in biases]
        n_in = self.weights[0].shape[1]
        self.in_mean = np.zeros(n_in) if in_mean is None else np.asarray(in_mean, dtype=float)
        self.in_std = np.ones(n_in) if in_std is None else np.asarray(in_std, dtype=float)

    @classmethod
    def init(cls, sizes=(4, 42, 42, 2), seed=0):
        rng = np.random.default_rng(seed)
        Ws, bs = [], []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            lim = np.sqrt(6.0 / (fan_in + fan_out))
            Ws.append(rng.uniform(-lim, lim, size=(fan_out, fan_in)))
            bs.append(np.zeros(fan_out))
        return cls(Ws, bs)

    @property
    def sizes(self):
        return [self.weights[0].shape[1]] + [W.shape[0] for W in self.weights]

    @property
    def params(self):
        out = []
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        return out

    def copy(self):
        return PolicyNet([W.copy() for W in self.weights], [b.copy() for b in self.biases],
                         self.in_mean.copy(), self.in_std.copy())

    def is_finite(self):
        return all(np.all(np.isfinite(p)) for p in self.params)

    def normalize(self, x):
        return (np.asarray(x, dtype=float) - self.in_mean) / self.in_std

    def __call__(self, x):
        return mlp_forward(self, x)


def _forward_cache(net: PolicyNet, z):
    acts = [z]
    pre = []
    h = z
    last = len(net.weights) - 1
    for l, (W, b) in enumerate(zip(net.weights, net.biases)):
        # einsum keeps each row's summation order independent of the batch size
        a = np.einsum("ni,oi->no", h, W) + b
        pre.append(a)
        h = a if l == last else np.maximum(a, 0.0)
        acts.append(h)
    return pre, acts


def mlp_forward(net: PolicyNet, x):
    """Mean action for one state ``(nx,)`` or a batch ``(N, nx)``."""
    x = np.asarray(x, dtype=float)
    z = net.normalize(np.atleast_2d(x))
    out = _forward_cache(net, z)[1][-1]
    return out[0] if x.ndim == 1 else out


def mlp_backward(net: PolicyNet, x, upstream):
    """Gradients of ``sum(upstream * mlp_forward(net, x))`` w.r.t. every parameter.

    Returns a list ordered like ``net.params``.
    """
    x = np.asarray(x, dtype=float)
    z = net.normalize(np.atleast_2d(x))
    g = np.atleast_2d(np.asarray(upstream, dtype=float))
    pre, acts = _forward_cache(net, z)
    grads = [None] * (2 * len(net.weights))
    for l in range(len(net.weights) - 1, -1, -1):
        grads[2 * l] = g.T @ acts[l]
        grads[2 * l + 1] = g.sum(axis=0)
        if l > 0:
            g = (g @ net.weights[l]) * (pre[l - 1] > 0)
    return grads


# ---------------------------------------------------------------------------
# KL between Gaussian policies
# ---------------------------------------------------------------------------

def gaussian_kl(mu_p, cov_p, mu_q, cov_q) -> float:
    """``KL(N(mu_p, cov_p) || N(mu_q, cov_q))``."""
    n = len(mu_p)
    Lq = np.linalg.cholesky(cov_q)
    Lp = np.linalg.cholesky(cov_p)
    diff = np.asarray(mu_p) - np.asarray(mu_q)
    solve = np.linalg.solve(cov_q, np.column_stack([cov_p, diff]))
    tr = np.trace(solve[:, :n])
    maha = diff @ solve[:, n]
    logdet = 2 * (np.log(np.diag(Lq)).sum() - np.log(np.diag(Lp)).sum())
    return float(0.5 * (tr + maha - n + logdet))


@dataclass
class TrainingSample:
    state: np.ndarray
    target: np.ndarray
    weight: np.ndarray       # inverse local covariance
    k: int
    c: int
    s: int
    i: int


def kl_sample_loss(net: PolicyNet, sample: TrainingSample, cov_global=None):
    """Return ``(quadratic, full_kl)`` for one sample.

    ``quadratic`` is the mean term ``0.5 d^T W d`` that training minimises;
    ``full_kl`` adds the covariance terms of the Gaussian KL from the global
    policy to the local one (``None`` when no global covariance is given).
    """
    W = np.asarray(sample.weight, dtype=float)
    try:
        np.linalg.cholesky(W)
    except np.linalg.LinAlgError as exc:
        raise ValueError("sample weight must be positive definite") from exc
    d = mlp_forward(net, sample.state) - sample.target
    quad = 0.5 * float(d @ W @ d)
    if cov_global is None:
        return quad, None
    local_cov = np.linalg.inv(W)
    full = gaussian_kl(mlp_forward(net, sample.state), cov_global, sample.target, local_cov)
    return quad, full


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def _stack(samples: Sequence[TrainingSample]):
    X = np.stack([s.state for s in samples])
    T = np.stack([s.target for s in samples])
    W = np.stack([s.weight for s in samples])
    return X, T, W


def batch_loss_and_grads(net: PolicyNet, X, T, W):
    pred = mlp_forward(net, X)
    d = pred - T
    Wd = np.einsum("nij,nj->ni", W, d)
    loss = 0.5 * float(np.einsum("ni,ni->", d, Wd)) / len(X)
    grads = mlp_backward(net, X, Wd / len(X))
    return loss, grads


class Adam:
    def __init__(self, params, cfg: AdamConfig):
        self.cfg = cfg
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def update(self, params, grads):
        c = self.cfg
        self.t += 1
        b1t = 1 - c.beta1 ** self.t
        b2t = 1 - c.beta2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= c.beta1
            m += (1 - c.beta1) * g
            v *= c.beta2
            v += (1 - c.beta2) * g * g
            p -= c.step * (m / b1t) / (np.sqrt(v / b2t) + c.eps)


@dataclass
class TrainResult:
    net: PolicyNet
    loss_trace: list          # per-epoch mean minibatch loss
    batch_losses: list        # every minibatch


def train_supervised(samples: Sequence[TrainingSample], net: PolicyNet | None = None,
                     cfg: TrainConfig | None = None, sizes=(4, 42, 42, 2),
                     refit_normalization: bool = True) -> TrainResult:
    """Minibatch Adam on the summed quadratic KL terms."""
    cfg = cfg or TrainConfig()
    if not samples:
        raise TrainingError("no training samples")
    X, T, W = _stack(samples)
    if net is None or not cfg.warm_start:
        net = PolicyNet.init(sizes, seed=cfg.seed)
        refit_normalization = True
    else:
        net = net.copy()
    if refit_normalization:
        net.in_mean = X.mean(axis=0)
        std = X.std(axis=0)
        net.in_std = np.where(std > 1e-8, std, 1.0)
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(net.params, cfg.adam)
    n = len(X)
    order = rng.permutation(n)
    pos = 0
    trace, batch_losses = [], []
    for epoch in range(cfg.epochs):
        ep = []
        for _ in range(cfg.batches_per_epoch):
            if pos + cfg.minibatch > n:
                order = rng.permutation(n)
                pos = 0
            idx = order[pos:pos + cfg.minibatch]
            pos += cfg.minibatch
            loss, grads = batch_loss_and_grads(net, X[idx], T[idx], W[idx])
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch indices {idx.tolist()}")
            opt.update(net.params, grads)
            ep.append(loss)
        batch_losses.extend(ep)
        trace.append(float(np.mean(ep)))
    return TrainResult(net, trace, batch_losses)


# ---------------------------------------------------------------------------
# training-set construction, global covariance, noise-reduction bound
# ---------------------------------------------------------------------------

def build_training_set(rollouts: dict, params: dict, iteration: int) -> list[TrainingSample]:
    """Pair every visited (observed) state with the local policy mean there.

    ``rollouts[c]`` is the list of S trajectories executed under
    ``params[c]``; both dicts are keyed by initial-condition index.
    """
    out = []
    for c, theta in params.items():
        if c not in rollouts:
            raise KeyError(f"missing rollouts for initial condition {c}")
        weights = np.linalg.inv(theta.cov)
        weights = 0.5 * (weights + weights.transpose(0, 2, 1))
        for s, traj in enumerate(rollouts[c]):
            if traj is None:
                raise KeyError(f"missing rollout (c={c}, s={s})")
            for k in range(theta.horizon):
                x = traj.observed_states[k]
                mu = theta.F[k] @ x + theta.e[k]
                out.append(TrainingSample(x.copy(), mu, weights[k].copy(), k, c, s, iteration))
    return out


def _eig_diag(cov):
    return np.apply_along_axis(np.diag, -1, np.linalg.eigvalsh(cov))


def global_covariance(local_covs, mode: str = "diag", diag_source: str = "eig") -> np.ndarray:
    """Harmonic average of local covariances over initial conditions.

    ``local_covs`` has shape ``(C, K, nu, nu)``.  ``mode="full"`` averages the
    precisions directly; ``mode="diag"`` first replaces every local covariance
    by the diagonal matrix of its eigenvalues (or of its diagonal entries when
    ``diag_source="entries"``).
    """
    covs = np.asarray(local_covs, dtype=float)
    if np.any(np.linalg.eigvalsh(covs) <= 0):
        raise ValueError("local covariances must be positive definite")
    if mode == "diag":
        if diag_source == "eig":
            covs = _eig_diag(covs)
        elif diag_source == "entries":
            covs = np.apply_along_axis(np.diag, -1, np.diagonal(covs, axis1=-2, axis2=-1))
        else:
            raise ValueError(f"unknown diag source {diag_source!r}")
    elif mode != "full":
        raise ValueError(f"unknown mode {mode!r}")
    prec = np.linalg.inv(covs).mean(axis=0)
    out = np.linalg.inv(prec)
    return 0.5 * (out + out.transpose(0, 2, 1))


@dataclass
class Theorem1Report:
    lhs: float
    rhs: float
    holds: bool


def theorem1_check(global_covs, initial_local_covs, slack: float = 1e-9) -> Theorem1Report:
    """Compare ``sum_k tr(inv Sigma^L_k)`` with the harmonic bound from the initial covariances.

    ``initial_local_covs`` has shape ``(C, K, nu, nu)``.
    """
    G = np.asarray(global_covs, dtype=float)
    S0 = np.asarray(initial_local_covs, dtype=float)
    C, K, nu, _ = S0.shape
    lhs = float(np.trace(np.linalg.inv(G), axis1=1, axis2=2).sum())
    tr0 = np.trace(S0, axis1=2, axis2=3).sum(axis=1)
    rhs = float(nu ** 2 * K ** 2 / C * np.sum(1.0 / tr0))
    return Theorem1Report(lhs, rhs, lhs >= rhs - slack)


class GlobalPolicy:
    """``u ~ N(net(x), Sigma^L_k)``; callable with the rollout policy signature."""

    def __init__(self, net: PolicyNet, covs):
        covs = np.asarray(covs, dtype=float)
        if np.any(np.linalg.eigvalsh(covs) <= 0):
            raise ValueError("global covariances must be positive definite")
        self.net = net
        self.covs = covs

    def __call__(self, k, x):
        return mlp_forward(self.net, x), self.covs[k]
