"""Cross-validate the skill classifier on simulated benchmarks over several seeds.

    python scripts/run_benchmark.py --seeds 0 1 2 --spread 0.25
"""
import argparse
import time

import numpy as np

from microskill.classifier import BoostParams, cross_validate
from microskill.config import PipelineConfig
from microskill.features import FEATURE_NAMES
from microskill.pipeline import feature_matrix
from microskill.simulator import benchmark_suite, default_prior


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0])
    ap.add_argument("--spread", type=float, default=0.25, help="per-procedure archetype jitter")
    ap.add_argument("--duration", type=float, default=40.0)
    ap.add_argument("--per-class", default="paper", help='"paper" (28/16/14) or an integer')
    args = ap.parse_args()

    cfg = PipelineConfig()
    prior = default_prior(cfg.tip.prior_samples, cfg.tip.prior_seed)
    sizes = args.per_class if args.per_class == "paper" else int(args.per_class)
    accs = []
    for seed in args.seeds:
        t0 = time.perf_counter()
        procs = benchmark_suite(sizes, seed, duration_s=args.duration, archetype_spread=args.spread)
        _, X, y = feature_matrix(procs, prior, cfg)
        rep = cross_validate(X, y, BoostParams(seed=seed), cfg.classifier.folds, list(FEATURE_NAMES),
                             cfg.features.fdr_q)
        accs.append(rep.pooled.accuracy)
        print(f"seed {seed}: {len(y)} procedures, pooled accuracy {rep.pooled.accuracy:.3f} "
              f"({time.perf_counter() - t0:.0f} s)")
        print(rep.table())
        print()
    print(f"mean {np.mean(accs):.3f}  min {np.min(accs):.3f}  max {np.max(accs):.3f}")


if __name__ == "__main__":
    main()
