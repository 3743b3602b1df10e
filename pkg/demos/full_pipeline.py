"""Run the full loop for one seed and compare the EM snapshot with the baseline-init policy.

Run with ``python3 demos/full_pipeline.py [out_dir] [epochs]``.  With the
default 500 epochs this takes a few minutes on one CPU core.
"""

import sys
import time

from emgps.harness import ExperimentConfig, compare_variants, run_pipeline


def main(out_dir: str = "demo_run", epochs: int = 500):
    cfg = ExperimentConfig()
    cfg.train.epochs = epochs
    t0 = time.perf_counter()
    run_pipeline(cfg, out_dir, progress=lambda m: print(f"[{time.perf_counter() - t0:6.1f}s] {m}"))
    rep = compare_variants(out_dir)
    for name in ("baseline", "em"):
        s = rep[name]
        print(f"{name:>9}: median cost {s['median_cost']:.1f}, "
              f"successes {s['successes']}/{s['experiments']}")
    print(f"EM action variance <= baseline in {rep['action_variance_leq_fraction']:.0%} of steps")
    print(f"Theorem 1 (last snapshot): {rep['theorem1'][-1]}")
    print(f"metric tables written under {out_dir}/eval")


if __name__ == "__main__":
    args = sys.argv[1:]
    main(args[0] if args else "demo_run", int(args[1]) if len(args) > 1 else 500)
