"""Command-line entry point: ``python3 -m emgps <subcommand> ...``.

Every subcommand prints a JSON summary on stdout.  Failures exit with status
1 and a JSON object ``{"error": ..., "message": ...}`` on stderr.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import io
from .controller import init_controller_lqr
from .dynamics import fit_model, fit_prior_gmm
from .em import em_optimize, observation_sequence
from .harness import (EM_HEADER, LOSS_HEADER, ExperimentConfig, RunManifest, compare_variants,
                      evaluate_policy, export_metrics, exploration_policy, load_config,
                      run_pipeline, state_prior, stream_seed)
from .policy import GlobalPolicy, build_training_set, global_covariance, train_supervised
from .sim import LinearGaussianPolicy, collect_batch


class CLIError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        _fail("UsageError", message, code=2)


def _fail(kind, message, code=1):
    sys.stderr.write(json.dumps({"error": kind, "message": str(message)}) + "\n")
    sys.exit(code)


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _ic(cfg, idx):
    ics = cfg.ics()
    if not 0 <= idx < len(ics):
        raise CLIError(f"initial condition index {idx} out of range (have {len(ics)})")
    return ics[idx]


def cmd_collect(args):
    cfg = _config(args)
    ic = _ic(cfg, args.ic)
    if args.controller:
        th = io.load_controller(args.controller)
        policy = LinearGaussianPolicy(th.F, th.e, th.cov)
    else:
        policy = exploration_policy(cfg)
    n = args.count or cfg.pipeline.batch_size
    batch = collect_batch(policy, ic, n, cfg.sim, cfg.cost, stream_seed(cfg.seed, 0, args.ic))
    path = io.save_batch(_out(args) / "batch.npz", batch)
    costs = [t.running_costs.sum() for t in batch]
    return {"batch": str(path), "trajectories": n, "median_cost": float(np.median(costs))}


def cmd_fit(args):
    cfg = _config(args)
    batches = [io.load_batch(p) for p in args.batch]
    gmm = fit_prior_gmm(batches, dataclasses.replace(cfg.fit, seed=cfg.seed))
    model = fit_model(batches[-1], cfg.fit, gmm=gmm)
    path = io.save_model(_out(args) / "model.json", model)
    return {"model": str(path), "horizon": model.horizon,
            "max_condition": max(model.diagnostics["condition_numbers"])}


def cmd_optimize(args):
    cfg = _config(args)
    model = io.load_model(args.model)
    ic = _ic(cfg, args.ic)
    if args.controller:
        theta = io.load_controller(args.controller)
    else:
        theta = init_controller_lqr(model, cfg.cost, cfg.pipeline.init_cov)
    batch_y = None
    if args.batch:
        batch_y = np.stack([t.cost_observations for t in io.load_batch(args.batch)])
    y = observation_sequence(cfg.em.observation, model.horizon, batch_y)
    pm, pc = state_prior(cfg, ic)
    iters = args.iters if args.iters is not None else cfg.pipeline.iterations
    recs, theta = em_optimize(model, theta, y, pm, pc, iters=iters, cm=cfg.cost, opts=cfg.em)
    out = _out(args)
    traces = [r.trace_sigma for r in recs] + [float(np.trace(theta.cov, axis1=1, axis2=2).sum())]
    rows = [[r.iteration, args.ic, 0, r.q_prev, r.q_mstep, r.q_next, r.loglik, r.surrogate_cost,
             traces[j], traces[j + 1], r.info_eigs.min(), r.info_eigs.max(), r.no_progress]
            for j, r in enumerate(recs)]
    io.write_csv(out / "em_diagnostics.csv", EM_HEADER, rows)
    path = io.save_controller(out / "controller.json", theta, iterations=iters, ic=args.ic)
    return {"controller": str(path), "iterations": len(recs),
            "q_gain": [r.q_mstep - r.q_prev for r in recs], "trace_sigma": traces}


def cmd_train(args):
    cfg = _config(args)
    thetas = [io.load_controller(p) for p in args.controller]
    if len(thetas) != len(cfg.initial_conditions):
        raise CLIError("pass one --controller per configured initial condition")
    rollouts, params = {}, {}
    for c, (ic, th) in enumerate(zip(cfg.ics(), thetas)):
        params[c] = th
        rollouts[c] = collect_batch(LinearGaussianPolicy(th.F, th.e, th.cov), ic,
                                    cfg.pipeline.rollouts, cfg.sim, cfg.cost,
                                    stream_seed(cfg.seed, 1, 0, c))
    samples = build_training_set(rollouts, params, 0)
    net = io.load_policy(args.init_policy).net if args.init_policy else None
    res = train_supervised(samples, net, dataclasses.replace(cfg.train, seed=cfg.seed))
    covs = global_covariance(np.stack([th.cov for th in thetas]),
                             cfg.pipeline.global_cov_mode, cfg.pipeline.diag_source)
    out = _out(args)
    path = io.save_policy(out / "policy.json", GlobalPolicy(res.net, covs), n_samples=len(samples))
    io.write_csv(out / "loss_trace.csv", LOSS_HEADER, [[0, ep, v] for ep, v in enumerate(res.loss_trace)])
    return {"policy": str(path), "samples": len(samples), "final_loss": res.loss_trace[-1]}


def cmd_evaluate(args):
    cfg = _config(args)
    if args.policy:
        policy = io.load_policy(args.policy)
        label = "policy"
    elif args.run is not None:
        man = RunManifest.load(args.run)
        snap = args.snapshot if args.snapshot is not None else max(man.snapshots)
        key = f"policy_{snap}"
        if key not in man.artifacts:
            raise CLIError(f"snapshot {snap} not found in {args.run}")
        policy = io.load_policy(Path(args.run) / man.artifacts[key])
        label = f"snapshot_{snap}"
    else:
        raise CLIError("evaluate needs --policy or --run")
    ev = evaluate_policy(policy, cfg, cfg.seed, label)
    paths = export_metrics([ev], _out(args), cfg.sim.horizon)
    return {"variant": label, "successes": ev.success_count, "experiments": int(ev.success.size),
            "median_cost": float(np.median(ev.costs)), "files": {k: str(v) for k, v in paths.items()}}


def cmd_pipeline(args):
    cfg = _config(args)
    man = run_pipeline(cfg, _out(args), seed=cfg.seed,
                       progress=lambda m: print(m, file=sys.stderr, flush=True))
    return {"status": man.status, "snapshots": man.snapshots, "theorem1": man.theorem1[-1],
            "manifest": str(Path(args.out) / "manifest.json")}


def cmd_compare(args):
    cfg = load_config(args.config) if args.config else None
    return compare_variants(args.out, cfg, em=args.snapshot, seed=args.seed)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="emgps", description="EM-based guided policy search on a noisy point mass")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, out_help="output directory"):
        sp.add_argument("--config", help="JSON experiment config")
        sp.add_argument("--seed", type=int, help="master seed (overrides the config)")
        sp.add_argument("--out", required=True, help=out_help)
        return sp

    sp = common(sub.add_parser("collect", help="roll out a batch of trajectories"))
    sp.add_argument("--ic", type=int, default=0)
    sp.add_argument("--controller", help="controller JSON; exploration noise if omitted")
    sp.add_argument("--count", type=int)
    sp.set_defaults(func=cmd_collect)

    sp = common(sub.add_parser("fit", help="fit time-varying linear dynamics"))
    sp.add_argument("--batch", nargs="+", required=True,
                    help="batch files; all feed the mixture prior, the last is fitted")
    sp.set_defaults(func=cmd_fit)

    sp = common(sub.add_parser("optimize", help="EM refinement of a local controller"))
    sp.add_argument("--model", required=True)
    sp.add_argument("--controller", help="starting controller; LQR if omitted")
    sp.add_argument("--batch", help="batch for the empirical observation policy")
    sp.add_argument("--ic", type=int, default=0)
    sp.add_argument("--iters", type=int)
    sp.set_defaults(func=cmd_optimize)

    sp = common(sub.add_parser("train", help="distil local controllers into the global policy"))
    sp.add_argument("--controller", nargs="+", required=True)
    sp.add_argument("--init-policy", help="warm-start from this policy")
    sp.set_defaults(func=cmd_train)

    sp = common(sub.add_parser("evaluate", help="run the test protocol"))
    sp.add_argument("--policy")
    sp.add_argument("--run", help="pipeline run directory")
    sp.add_argument("--snapshot", type=int)
    sp.set_defaults(func=cmd_evaluate)

    sp = common(sub.add_parser("pipeline", help="full EM-GPS loop"))
    sp.set_defaults(func=cmd_pipeline)

    sp = common(sub.add_parser("compare", help="baseline-init vs EM snapshot"), "pipeline run directory")
    sp.add_argument("--snapshot", type=int, help="EM snapshot (default: last)")
    sp.set_defaults(func=cmd_compare)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        result = args.func(args)
    except Exception as exc:  # surfaced as machine-readable JSON
        _fail(type(exc).__name__, exc)
    print(json.dumps(io.to_jsonable(result), indent=1, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
