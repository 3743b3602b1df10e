"""Fit time-varying linear dynamics to noisy point-mass rollouts and smooth one episode.

Run with ``python3 demos/fit_and_smooth.py``.
"""

import numpy as np

from emgps.controller import closed_loop, init_controller_lqr
from emgps.dynamics import fit_model
from emgps.em import observation_sequence
from emgps.harness import ExperimentConfig, exploration_policy, state_prior
from emgps.sim import LinearGaussianPolicy, collect_batch, euler_matrices
from emgps.smoother import smooth


def main():
    cfg = ExperimentConfig()
    ic = cfg.ics()[0]
    batch = collect_batch(exploration_policy(cfg), ic, cfg.pipeline.batch_size, cfg.sim, cfg.cost, 0)
    model = fit_model(batch, cfg.fit)

    A, B, _ = euler_matrices(cfg.sim)
    ref = np.hstack([A, B])
    err = [np.linalg.norm(np.hstack([model.Ad[k], model.Bd[k]]) - ref) / np.linalg.norm(ref)
           for k in range(model.horizon)]
    print(f"relative error of the fitted [A B] vs the Euler update: "
          f"median {np.median(err):.3f}, worst {max(err):.3f}")

    theta = init_controller_lqr(model, cfg.cost, cfg.pipeline.init_cov)
    runs = collect_batch(LinearGaussianPolicy(theta.F, theta.e, theta.cov), ic, 10,
                         cfg.sim, cfg.cost, 1)
    costs = [t.running_costs.sum() for t in runs]
    print(f"LQR controller on the fitted model: median cost-to-go {np.median(costs):.1f}")

    pm, pc = state_prior(cfg, ic)
    y = observation_sequence(cfg.em.observation, model.horizon)
    sm = smooth(closed_loop(model, theta), y, pm, pc)
    print("smoothed position (first 5 steps):")
    for k in range(5):
        sd = np.sqrt(np.diag(sm.cov[k])[:2])
        print(f"  k={k}  x={sm.mean[k, 0]:7.3f} +- {sd[0]:.3f}  y={sm.mean[k, 1]:7.3f} +- {sd[1]:.3f}")


if __name__ == "__main__":
    main()
