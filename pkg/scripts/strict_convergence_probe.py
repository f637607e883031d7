"""How far EM-IS gets toward the strict convergence thresholds at small T.

For a few seeded J=5, L=3 datasets, runs EM-IS for increasing iteration
budgets with convergence disabled and prints the feasibility residual and
log-likelihood change at each budget.  At T in the low hundreds the
residual decays roughly like 1/t, because the likelihood supremum sits at
unbounded weights.
"""

import argparse

import numpy as np

from lmebm.estimation import EmisConfig, em_is
from lmebm.experiment import draw_truth
from lmebm.model import MachineSpec, WeightMatrix, enumerate_distribution, sample_observed


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--samples", type=int, default=100)
    p.add_argument("--datasets", type=int, default=3)
    p.add_argument("--budget", type=int, default=20_000)
    args = p.parse_args()

    spec = MachineSpec(5, 3)
    checkpoints = [b for b in (100, 500, 2000, 5000, 20_000, 100_000) if b <= args.budget]
    print("dataset " + " ".join(f"{'resid@' + str(b):>14s}" for b in checkpoints) + "   max|w|")
    for k in range(args.datasets):
        truth = draw_truth(spec, 2.0, 1000 + k)
        data = sample_observed(enumerate_distribution(spec, truth), args.samples, 2000 + k)
        init = WeightMatrix.random(8, 1.0, np.random.default_rng([3000 + k, 0]))
        cfg = EmisConfig(max_iter=checkpoints[-1], tol=1e-300, feasibility_tol=1e-300, stall_patience=10**9)
        w, trace = em_is(spec, init, data, cfg)
        resid = [trace.records[b].max_residual for b in checkpoints]
        print(f"{k:7d} " + " ".join(f"{r:14.2e}" for r in resid) + f"   {np.max(np.abs(w.values)):.1f}")


if __name__ == "__main__":
    main()
