"""Run the three LME-vs-MLE scenarios and write per-trial and aggregate CSVs.

Defaults match the full design at the small sizes (restarts 100, trials 5,
sizes 50 and 100); pass --smoke for the quick variant.
"""

import argparse
import logging
import time
from pathlib import Path

from lmebm.experiment import aggregate, make_scenarios, run_experiment, verdicts, write_aggregate, write_results
from lmebm.selection import RestartPlan


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--restarts", type=int, default=100)
    p.add_argument("--trials", type=int, default=5)
    p.add_argument("--sizes", default="50,100")
    p.add_argument("--scenarios", default="exp1,exp2,exp3")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--smoke", action="store_true", help="restarts 10, trials 2")
    p.add_argument("--out", default="runs/experiments")
    p.add_argument("--verbose", action="store_true")
    args = p.parse_args()
    if args.smoke:
        args.restarts, args.trials = 10, 2
    if args.verbose:
        logging.basicConfig(level=logging.INFO, format="%(message)s")

    sizes = tuple(int(s) for s in args.sizes.split(","))
    wanted = args.scenarios.split(",")
    configs = [
        c
        for c in make_scenarios(args.seed, sizes=sizes, trials=args.trials, plan=RestartPlan(args.restarts))
        if c.name in wanted
    ]
    start = time.perf_counter()
    results = []
    for cfg in configs:
        results.extend(run_experiment(cfg, jobs=args.jobs))
    summary = aggregate(results)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_results(out / "results.csv", results)
    write_aggregate(out / "aggregate.csv", summary)
    for line in verdicts(summary):
        print(line)
    print(f"elapsed {time.perf_counter() - start:.1f}s")


if __name__ == "__main__":
    main()
