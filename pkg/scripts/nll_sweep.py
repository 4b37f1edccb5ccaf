"""Mean sample NLL per estimator and K on random d-dimensional mixtures.

Reverse-SDE samples are scored under the true mixture; lower is better. All
estimators share the same chains' noise within a seed, so differences between
them are paired.

    python3 scripts/nll_sweep.py --dim 15 --k 5 10 30 --seeds 5
"""

from __future__ import annotations

import argparse

from cvsi.config import config_from_dict
from cvsi.experiments import run_nll


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--dim", type=int, nargs="+", default=[15])
    parser.add_argument("--components", type=int, nargs="+", default=[10])
    parser.add_argument("--k", type=int, nargs="+", default=[5, 10, 30])
    parser.add_argument("--estimators", nargs="+", default=["dsi", "tsi", "tsm-global", "cvsi"])
    parser.add_argument("--seeds", type=int, default=5)
    parser.add_argument("--chains", type=int, default=400)
    parser.add_argument("--steps", type=int, default=300)
    parser.add_argument("--seed", type=int, default=9)
    args = parser.parse_args()

    cfg = config_from_dict({
        "experiment": "nll",
        "seed": args.seed,
        "target": {"kind": "random-gmm"},
        "dims": args.dim,
        "component_counts": args.components,
        "k_values": args.k,
        "estimators": args.estimators,
        "n_seeds": args.seeds,
        "n_chains": args.chains,
        "n_steps": args.steps,
    })
    for key, value in sorted(run_nll(cfg).summary["mean_nll"].items()):
        print(f"{key:32s} {value:.4f}")


if __name__ == "__main__":
    main()
