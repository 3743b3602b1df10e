"""End-to-end EM-GPS loop, test protocol and metric exports.

A run directory looks like::

    config.json  manifest.json  em_diagnostics.csv  loss_trace.csv
    batches/   models/   controllers/   policies/   rollouts/

and ``compare_variants`` adds ``eval/`` with the metric CSVs.
"""

from __future__ import annotations

import dataclasses
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from . import io
from .controller import ControllerParams, init_controller_lqr
from .dynamics import FitConfig, fit_model, fit_prior_gmm
from .em import EMOptions, em_optimize, observation_sequence
from .policy import (AdamConfig, GlobalPolicy, TrainConfig, build_training_set,
                     global_covariance, theorem1_check, train_supervised)
from .sim import (ConfigError, CostModel, InitialCondition, LinearGaussianPolicy,
                  OpenLoopGaussianPolicy, SimConfig, Trajectory, collect_batch, rollout)

log = logging.getLogger(__name__)

# stream identifiers for seed derivation
_COLLECT, _ROLLOUT, _TRAIN, _TEST_IC, _TEST_ROLL, _GMM = range(6)


def stream_seed(master: int, *key: int) -> int:
    """Independent child seed for a named stage; stable across runs."""
    ss = np.random.SeedSequence(int(master), spawn_key=tuple(int(k) for k in key))
    return int(ss.generate_state(1, dtype=np.uint32)[0])


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass
class SuccessCriterion:
    pos_center: tuple = (5.0, 20.0)
    pos_radii: tuple = (0.8, 2.0)
    act_center: tuple = (0.0, 0.0)
    act_radii: tuple = (0.4, 1.5)

    def __post_init__(self):
        if min(self.pos_radii) <= 0 or min(self.act_radii) <= 0:
            raise ConfigError("ellipse radii must be positive")


@dataclass
class PipelineSettings:
    iterations: int = 9            # I
    batch_size: int = 50           # M, trajectories per model fit
    rollouts: int = 10             # S, trajectories per training round
    em_iters_per_round: int = 1
    init_cov: float = 1.0
    explore_mean: tuple = (0.0, 9.8)
    explore_std: float = 10.0
    global_cov_mode: str = "diag"
    diag_source: str = "eig"


@dataclass
class TestSettings:
    n_dists: int = 10
    n_rollouts: int = 10
    radius: float = 1.0


@dataclass
class ExperimentConfig:
    sim: SimConfig = field(default_factory=SimConfig)
    cost: CostModel = field(default_factory=CostModel)
    fit: FitConfig = field(default_factory=FitConfig)
    em: EMOptions = field(default_factory=EMOptions)
    train: TrainConfig = field(default_factory=TrainConfig)
    pipeline: PipelineSettings = field(default_factory=PipelineSettings)
    test: TestSettings = field(default_factory=TestSettings)
    success: SuccessCriterion = field(default_factory=SuccessCriterion)
    initial_conditions: list = field(default_factory=lambda: [[0.0, 5.0], [2.0, 5.5]])
    ic_cov: float = 1e-2
    seed: int = 0

    def __post_init__(self):
        if len(self.initial_conditions) < 1:
            raise ConfigError("need at least one initial condition")
        if self.pipeline.iterations < 1:
            raise ConfigError("pipeline needs at least one iteration")
        if self.pipeline.batch_size < 2 or self.pipeline.rollouts < 1:
            raise ConfigError("batch size must be >= 2 and rollouts >= 1")

    def ics(self) -> list[InitialCondition]:
        return [InitialCondition(np.asarray(m, dtype=float), self.ic_cov * np.eye(4))
                for m in self.initial_conditions]

    def to_dict(self) -> dict:
        return io.to_jsonable(dataclasses.asdict(self))

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        sections = {"sim": SimConfig, "cost": CostModel, "fit": FitConfig, "em": EMOptions,
                    "pipeline": PipelineSettings, "test": TestSettings,
                    "success": SuccessCriterion}
        kw = {}
        for name, typ in sections.items():
            if name in d:
                kw[name] = _build(typ, d.pop(name), name)
        if "train" in d:
            t = dict(d.pop("train"))
            adam = _build(AdamConfig, t.pop("adam", {}), "train.adam")
            kw["train"] = _build(TrainConfig, {**t, "adam": adam}, "train")
        for name in ("initial_conditions", "ic_cov", "seed"):
            if name in d:
                kw[name] = d.pop(name)
        if d:
            raise ConfigError(f"unknown config keys: {sorted(d)}")
        return cls(**kw)


def _build(typ, values: dict, where: str):
    names = {f.name for f in dataclasses.fields(typ)}
    extra = set(values) - names
    if extra:
        raise ConfigError(f"unknown keys in {where}: {sorted(extra)}")
    try:
        return typ(**values)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def load_config(path) -> ExperimentConfig:
    import json
    with open(path) as fh:
        return ExperimentConfig.from_dict(json.load(fh))


# ---------------------------------------------------------------------------
# pipeline
# ---------------------------------------------------------------------------

@dataclass
class RunManifest:
    config_hash: str
    seed: int
    artifacts: dict = field(default_factory=dict)   # name -> path relative to the run dir
    timing: dict = field(default_factory=dict)
    version: str = __version__
    status: str = "running"
    error: str | None = None
    snapshots: list = field(default_factory=list)
    theorem1: list = field(default_factory=list)

    def save(self, out_dir) -> Path:
        return io.save_json(Path(out_dir) / "manifest.json", "manifest", dataclasses.asdict(self))

    @classmethod
    def load(cls, out_dir) -> "RunManifest":
        d = io.load_json(Path(out_dir) / "manifest.json", "manifest")
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


EM_HEADER = ["iteration", "ic", "em_step", "q_prev", "q_mstep", "q_next", "loglik",
             "surrogate_cost", "trace_sigma", "trace_sigma_next", "info_eig_min",
             "info_eig_max", "no_progress"]
LOSS_HEADER = ["snapshot", "epoch", "loss"]


def exploration_policy(cfg: ExperimentConfig):
    p = cfg.pipeline
    return OpenLoopGaussianPolicy(np.asarray(p.explore_mean, dtype=float), p.explore_std,
                                  cfg.sim.horizon)


def state_prior(cfg: ExperimentConfig, ic: InitialCondition):
    """Prior over the first observed state: initial spread plus observation noise."""
    return ic.mean, ic.cov + cfg.sim.noise_factor * np.eye(len(ic.mean))


def _policy_of(theta: ControllerParams):
    return LinearGaussianPolicy(theta.F, theta.e, theta.cov)


def run_pipeline(cfg: ExperimentConfig, out_dir, seed: int | None = None,
                 progress=None) -> RunManifest:
    """Run the full loop; snapshot 0 is the LQR-seeded policy, snapshot i the i-th EM round."""
    seed = cfg.seed if seed is None else int(seed)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg_dict = cfg.to_dict()
    io.save_json(out / "config.json", "config", cfg_dict)
    man = RunManifest(io.config_hash(cfg_dict), seed)
    man.artifacts["config"] = "config.json"
    say = progress or (lambda msg: None)
    t_start = time.perf_counter()
    try:
        _run(cfg, out, seed, man, say)
        man.status = "complete"
    except Exception as exc:
        man.status = "failed"
        man.error = f"{type(exc).__name__}: {exc}"
        raise
    finally:
        man.timing["total_s"] = time.perf_counter() - t_start
        man.save(out)
    return man


def _run(cfg: ExperimentConfig, out: Path, seed: int, man: RunManifest, say):
    ics = cfg.ics()
    C = len(ics)
    P = cfg.pipeline
    K = cfg.sim.horizon
    timing = man.timing
    em_rows, loss_rows = [], []
    history: list[list[Trajectory]] = []
    thetas: dict[int, ControllerParams] = {}
    initial_covs = None
    samples = []
    net = None

    def rel(path):
        return str(Path(path).relative_to(out))

    for i in range(P.iterations + 1):
        t0 = time.perf_counter()
        batches = {}
        for c, ic in enumerate(ics):
            policy = exploration_policy(cfg) if i == 0 else _policy_of(thetas[c])
            batches[c] = collect_batch(policy, ic, P.batch_size, cfg.sim, cfg.cost,
                                       stream_seed(seed, _COLLECT, i, c))
            man.artifacts[f"batch_i{i}_c{c}"] = rel(io.save_batch(out / "batches" / f"i{i}_c{c}.npz",
                                                                  batches[c]))
            history.append(batches[c])
        fit_cfg = dataclasses.replace(cfg.fit, seed=stream_seed(seed, _GMM, i))
        gmm = fit_prior_gmm(history, fit_cfg)
        timing[f"collect_fit_{i}"] = time.perf_counter() - t0

        t0 = time.perf_counter()
        rollouts, params = {}, {}
        for c, ic in enumerate(ics):
            model = fit_model(batches[c], fit_cfg, gmm=gmm)
            man.artifacts[f"model_i{i}_c{c}"] = rel(io.save_model(out / "models" / f"i{i}_c{c}.json", model))
            if i == 0:
                theta = init_controller_lqr(model, cfg.cost, P.init_cov)
            else:
                y = observation_sequence(cfg.em.observation, K,
                                         np.stack([t.cost_observations for t in batches[c]]))
                pm, pc = state_prior(cfg, ic)
                recs, theta = em_optimize(model, thetas[c], y, pm, pc, iters=P.em_iters_per_round,
                                          cm=cfg.cost, opts=cfg.em)
                traces = [r.trace_sigma for r in recs] + [float(np.trace(theta.cov, axis1=1, axis2=2).sum())]
                for j, r in enumerate(recs):
                    em_rows.append([i, c, j, r.q_prev, r.q_mstep, r.q_next, r.loglik, r.surrogate_cost,
                                    traces[j], traces[j + 1], r.info_eigs.min(), r.info_eigs.max(),
                                    r.no_progress])
            thetas[c] = theta
            params[c] = theta
            man.artifacts[f"controller_i{i}_c{c}"] = rel(io.save_controller(
                out / "controllers" / f"i{i}_c{c}.json", theta, iteration=i, ic=c))
            rollouts[c] = collect_batch(_policy_of(theta), ic, P.rollouts, cfg.sim, cfg.cost,
                                        stream_seed(seed, _ROLLOUT, i, c))
            man.artifacts[f"rollouts_i{i}_c{c}"] = rel(io.save_batch(out / "rollouts" / f"i{i}_c{c}.npz",
                                                                     rollouts[c]))
        if initial_covs is None:
            initial_covs = np.stack([thetas[c].cov for c in range(C)])
        timing[f"em_{i}"] = time.perf_counter() - t0

        t0 = time.perf_counter()
        new = build_training_set(rollouts, params, i)
        samples = samples + new if cfg.train.warm_start else new
        tcfg = dataclasses.replace(cfg.train, seed=stream_seed(seed, _TRAIN, i))
        res = train_supervised(samples, net, tcfg)
        net = res.net
        loss_rows += [[i, ep, v] for ep, v in enumerate(res.loss_trace)]
        covs = global_covariance(np.stack([thetas[c].cov for c in range(C)]),
                                 P.global_cov_mode, P.diag_source)
        gp = GlobalPolicy(net, covs)
        man.artifacts[f"policy_{i}"] = rel(io.save_policy(out / "policies" / f"snapshot_{i}.json", gp,
                                                          iteration=i, n_samples=len(samples)))
        man.snapshots.append(i)
        rep = theorem1_check(covs, initial_covs)
        man.theorem1.append({"snapshot": i, "lhs": rep.lhs, "rhs": rep.rhs, "holds": rep.holds})
        timing[f"train_{i}"] = time.perf_counter() - t0
        say(f"iteration {i}: {len(samples)} samples, final loss {res.loss_trace[-1]:.4g}")

        man.artifacts["em_diagnostics"] = rel(io.write_csv(out / "em_diagnostics.csv", EM_HEADER, em_rows))
        man.artifacts["loss_trace"] = rel(io.write_csv(out / "loss_trace.csv", LOSS_HEADER, loss_rows))
        man.save(out)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def success_test(traj: Trajectory, crit: SuccessCriterion | None = None) -> bool:
    """Final position ``x_K`` and last-but-one action ``u_{K-1}`` inside their ellipses.

    With K actions, ``x_K`` is ``true_states[K-1]`` and ``u_{K-1}`` is
    ``actions[K-2]`` (episodes are indexed from 1).
    """
    crit = crit or SuccessCriterion()
    K = traj.horizon
    pos = traj.true_states[K - 1, :2]
    act = traj.actions[max(K - 2, 0)]
    return _inside(pos, crit.pos_center, crit.pos_radii) and _inside(act, crit.act_center, crit.act_radii)


def _inside(p, center, radii) -> bool:
    z = (np.asarray(p, dtype=float) - np.asarray(center)) / np.asarray(radii)
    return bool(z @ z <= 1.0)


def draw_test_distributions(cfg: ExperimentConfig, seed: int) -> list[InitialCondition]:
    """Test initial-condition means drawn uniformly in a disk around each training mean."""
    rng = np.random.default_rng(stream_seed(seed, _TEST_IC))
    ics = cfg.ics()
    out = []
    for j in range(cfg.test.n_dists):
        base = ics[j % len(ics)].mean
        r = cfg.test.radius * np.sqrt(rng.uniform())
        a = rng.uniform(0, 2 * np.pi)
        mean = base.copy()
        mean[:2] += r * np.array([np.cos(a), np.sin(a)])
        out.append(InitialCondition(mean, cfg.ic_cov * np.eye(len(mean))))
    return out


@dataclass
class Evaluation:
    label: str
    dists: list                 # InitialCondition per distribution
    trajectories: list          # [dist][sample] -> Trajectory
    success: np.ndarray         # (n_dists, n_rollouts) bool

    @property
    def costs(self) -> np.ndarray:
        return np.array([[t.running_costs.sum() for t in row] for row in self.trajectories])

    @property
    def success_count(self) -> int:
        return int(self.success.sum())

    def actions(self) -> np.ndarray:
        """``(n_experiments, K, nu)`` executed actions."""
        return np.stack([t.actions for row in self.trajectories for t in row])


def evaluate_policy(policy, cfg: ExperimentConfig, seed: int, label: str = "policy",
                    dists: list | None = None) -> Evaluation:
    """Run the test protocol; rollout seeds depend only on ``seed`` so variants share noise draws."""
    dists = draw_test_distributions(cfg, seed) if dists is None else dists
    trajs, succ = [], []
    for j, ic in enumerate(dists):
        row = [rollout(policy, ic, cfg.sim, cfg.cost, stream_seed(seed, _TEST_ROLL, j, s))
               for s in range(cfg.test.n_rollouts)]
        trajs.append(row)
        succ.append([success_test(t, cfg.success) for t in row])
    return Evaluation(label, dists, trajs, np.array(succ, dtype=bool).reshape(len(dists), -1))


COST_HEADER = ["variant", "dist", "sample", "cost_to_go", "final_x", "final_y",
               "action_x", "action_y", "success"]
ENVELOPE_HEADER = ["variant", "dist", "coord", "k", "mean", "std"]
SUCCESS_HEADER = ["variant", "successes", "experiments"]
ACTION_HEADER = ["variant", "dist", "sample", "k", "u_x", "u_y"]
ACTION_VAR_HEADER = ["k", "baseline_var", "em_var", "em_leq"]


def export_metrics(evals: list[Evaluation], out_dir, horizon: int) -> dict:
    """Write the four metric tables; returns ``name -> path``."""
    out = Path(out_dir)
    cost_rows, env_rows, succ_rows, act_rows = [], [], [], []
    for ev in evals:
        K = horizon
        for j, row in enumerate(ev.trajectories):
            X = np.stack([t.true_states for t in row])
            for s, t in enumerate(row):
                fx, fy = t.true_states[K - 1, :2]
                ux, uy = t.actions[max(K - 2, 0)]
                cost_rows.append([ev.label, j, s, t.running_costs.sum(), fx, fy, ux, uy,
                                  bool(ev.success[j, s])])
                act_rows += [[ev.label, j, s, k, t.actions[k, 0], t.actions[k, 1]] for k in range(K)]
            for q in range(X.shape[2]):
                for k in range(K):
                    env_rows.append([ev.label, j, q, k, X[:, k, q].mean(), X[:, k, q].std()])
        succ_rows.append([ev.label, ev.success_count, ev.success.size])
    return {
        "costs": io.write_csv(out / "costs.csv", COST_HEADER, cost_rows),
        "envelopes": io.write_csv(out / "envelopes.csv", ENVELOPE_HEADER, env_rows),
        "success": io.write_csv(out / "success.csv", SUCCESS_HEADER, succ_rows),
        "actions": io.write_csv(out / "actions.csv", ACTION_HEADER, act_rows),
    }


def action_variance(ev: Evaluation) -> np.ndarray:
    """Per-step total sample variance of executed actions across all test experiments."""
    U = ev.actions()
    return U.var(axis=0, ddof=1).sum(axis=1)


def compare_variants(run_dir, cfg: ExperimentConfig | None = None, baseline: int = 0,
                     em: int | None = None, seed: int | None = None,
                     all_snapshots: bool = True) -> dict:
    """Evaluate the baseline-init and EM snapshots on one seeded test set."""
    run_dir = Path(run_dir)
    man = RunManifest.load(run_dir)
    cfg = cfg or ExperimentConfig.from_dict(
        {k: v for k, v in io.load_json(run_dir / "config.json", "config").items()
         if k not in ("schema_version", "kind")})
    seed = man.seed if seed is None else seed
    em = max(man.snapshots) if em is None else em

    def load(i):
        key = f"policy_{i}"
        if key not in man.artifacts or not (run_dir / man.artifacts[key]).exists():
            raise FileNotFoundError(f"snapshot {i} not found in {run_dir}")
        return io.load_policy(run_dir / man.artifacts[key])

    dists = draw_test_distributions(cfg, seed)
    ev_base = evaluate_policy(load(baseline), cfg, seed, "baseline-init", dists)
    ev_em = evaluate_policy(load(em), cfg, seed, "em", dists)
    evals = [ev_base, ev_em]
    per_snapshot = []
    if all_snapshots:
        for i in man.snapshots:
            if i in (baseline, em):
                ev = ev_base if i == baseline else ev_em
            else:
                ev = evaluate_policy(load(i), cfg, seed, f"snapshot_{i}", dists)
            per_snapshot.append([f"snapshot_{i}", ev.success_count, ev.success.size,
                                 float(np.median(ev.costs))])
    eval_dir = run_dir / "eval"
    paths = export_metrics(evals, eval_dir, cfg.sim.horizon)
    v_base, v_em = action_variance(ev_base), action_variance(ev_em)
    leq = v_em <= v_base
    paths["action_variance"] = io.write_csv(
        eval_dir / "action_variance.csv", ACTION_VAR_HEADER,
        [[k, v_base[k], v_em[k], bool(leq[k])] for k in range(len(leq))])
    paths["snapshots"] = io.write_csv(eval_dir / "snapshot_success.csv",
                                      ["variant", "successes", "experiments", "median_cost"],
                                      per_snapshot)
    cb, ce = ev_base.costs.ravel(), ev_em.costs.ravel()
    report = {
        "baseline_snapshot": baseline, "em_snapshot": em, "seed": seed,
        "baseline": _cost_stats(cb, ev_base.success_count),
        "em": _cost_stats(ce, ev_em.success_count),
        "paired": {"median_diff": float(np.median(ce - cb)),
                   "mean_diff": float(np.mean(ce - cb)),
                   "em_better_fraction": float(np.mean(ce < cb))},
        "action_variance_leq_fraction": float(leq.mean()),
        "theorem1": man.theorem1,
        "files": {k: str(Path(p).relative_to(run_dir)) for k, p in paths.items()},
    }
    io.save_json(eval_dir / "comparison.json", "comparison", report)
    return report


def _cost_stats(costs, successes):
    return {"median_cost": float(np.median(costs)), "mean_cost": float(np.mean(costs)),
            "std_cost": float(np.std(costs)), "successes": int(successes),
            "experiments": int(costs.size)}
