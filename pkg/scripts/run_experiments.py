"""Run (or reuse cached) overfit experiments used by the acceptance suite.

    python3 scripts/run_experiments.py [--results DIR]

Runs, in order: seed 0 with the default mask-distribution weight, seed 0 with
that weight set to zero, then seeds 1 and 2 with the default weight.
"""
import argparse
import json
import os
from pathlib import Path

from pitavatar.experiments import overfit

RUNS = [(0, 0.5), (0, 0.0), (1, 0.5), (2, 0.5)]


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--results", default=os.environ.get("PITAVATAR_RESULTS", Path(__file__).parents[1] / "results"))
    args = p.parse_args()
    for seed, lam in RUNS:
        r = overfit(args.results, seed=seed, lambda_dis=lam, log=lambda m: print(m, flush=True))
        print(json.dumps(r, sort_keys=True), flush=True)


if __name__ == "__main__":
    main()
