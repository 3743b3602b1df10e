"""Refine one local controller by EM and print the per-iteration diagnostics.

Run with ``python3 demos/em_refinement.py``.
"""

import numpy as np

from emgps.controller import init_controller_lqr
from emgps.dynamics import fit_model
from emgps.em import em_optimize, observation_sequence
from emgps.harness import ExperimentConfig, exploration_policy, state_prior
from emgps.sim import collect_batch


def main(iters: int = 5):
    cfg = ExperimentConfig()
    ic = cfg.ics()[0]
    batch = collect_batch(exploration_policy(cfg), ic, cfg.pipeline.batch_size, cfg.sim, cfg.cost, 0)
    model = fit_model(batch, cfg.fit)
    theta = init_controller_lqr(model, cfg.cost, cfg.pipeline.init_cov)
    y = observation_sequence(cfg.em.observation, model.horizon)
    pm, pc = state_prior(cfg, ic)
    recs, theta = em_optimize(model, theta, y, pm, pc, iters=iters, cm=cfg.cost, opts=cfg.em)

    print(f"{'it':>3} {'L(i,i)':>12} {'L(i+1,i)':>12} {'loglik':>10} {'surrogate':>10} "
          f"{'tr Sigma':>9} {'eig I_S':>17}")
    for r in recs:
        print(f"{r.iteration:>3} {r.q_prev:12.4f} {r.q_mstep:12.4f} {r.loglik:10.3f} "
              f"{r.surrogate_cost:10.1f} {r.trace_sigma:9.4f} "
              f"[{r.info_eigs.min():.4f}, {r.info_eigs.max():.4f}]")
    print(f"final tr Sigma: {np.trace(theta.cov, axis1=1, axis2=2).sum():.4f}")


if __name__ == "__main__":
    main()
