"""Multi-restart EM-IS and selection of the maximum-entropy / maximum-likelihood candidate."""

from __future__ import annotations

import csv
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .estimation import EmisConfig, em_is, q_from_targets, targets_from
from .model import (
    Dataset,
    MachineSpec,
    WeightMatrix,
    enumerate_distribution,
    entropy,
    log_likelihood,
)


class SelectionError(RuntimeError):
    """No converged candidate to select from."""


@dataclass(frozen=True)
class RestartPlan:
    restarts: int = 100
    init_width: float = 1.0
    master_seed: int = 0

    def __post_init__(self):
        if self.restarts < 1:
            raise ValueError("restarts must be >= 1")
        if self.init_width < 0:
            raise ValueError("init_width must be non-negative")

    def seeds(self) -> list[int]:
        return [self.master_seed + r for r in range(self.restarts)]


@dataclass(frozen=True, eq=False)
class CandidateModel:
    weights: WeightMatrix
    log_likelihood: float
    entropy: float  # -Q(lambda*, lambda*), the by-product of the M step
    direct_entropy: float
    residual: float
    converged: bool
    seed: int
    iterations: int
    termination: str = ""

    @property
    def identity_gap(self) -> float:
        """|Q(lambda*, lambda*) + H(p_lambda*)|; zero at an exactly feasible point."""
        return abs(self.entropy - self.direct_entropy)

    def key(self):
        return (
            self.weights.values.tobytes(),
            self.log_likelihood,
            self.entropy,
            self.direct_entropy,
            self.residual,
            self.converged,
            self.seed,
            self.iterations,
            self.termination,
        )

    def __eq__(self, other):
        if not isinstance(other, CandidateModel):
            return NotImplemented
        return self.key() == other.key()


def initial_weights(spec: MachineSpec, width: float, seed: int) -> WeightMatrix:
    if width == 0:
        return WeightMatrix.zeros(spec.num_nodes)
    return WeightMatrix.random(spec.num_nodes, width, np.random.default_rng(seed))


def annotate(spec: MachineSpec, weights: WeightMatrix, data: Dataset, trace, seed: int) -> CandidateModel:
    dist = enumerate_distribution(spec, weights)
    targets = targets_from(dist, data)
    q_self = q_from_targets(dist, targets)
    resid = float(np.max(np.abs(dist.feature_expectations - targets.values), initial=0.0))
    return CandidateModel(
        weights=weights,
        log_likelihood=log_likelihood(dist, data),
        entropy=-q_self,
        direct_entropy=entropy(dist),
        residual=resid,
        converged=trace.converged,
        seed=seed,
        iterations=trace.iterations,
        termination=trace.termination,
    )


def _one_restart(args):
    spec, data, width, seed, config = args
    init = initial_weights(spec, width, seed)
    weights, trace = em_is(spec, init, data, config)
    return annotate(spec, weights, data, trace, seed)


def run_restarts(
    spec: MachineSpec,
    data: Dataset,
    plan: RestartPlan = RestartPlan(),
    config: EmisConfig = EmisConfig(),
    jobs: int = 1,
) -> list[CandidateModel]:
    """One EM-IS run per restart seed, returned in restart order."""
    data.check_width(spec)
    work = [(spec, data, plan.init_width, seed, config) for seed in plan.seeds()]
    if jobs > 1 and len(work) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_one_restart, work))
    return [_one_restart(w) for w in work]


def _eligible(candidates):
    pool = [c for c in candidates if c.converged]
    if not pool:
        raise SelectionError(f"none of {len(candidates)} candidates converged")
    return pool


def select_lme(candidates) -> CandidateModel:
    """Highest entropy; ties by likelihood, then by the lower seed."""
    return max(_eligible(candidates), key=lambda c: (c.entropy, c.log_likelihood, -c.seed))


def select_mle(candidates) -> CandidateModel:
    """Highest likelihood; ties by entropy, then by the lower seed."""
    return max(_eligible(candidates), key=lambda c: (c.log_likelihood, c.entropy, -c.seed))


def count_basins(candidates, atol: float = 1e-4) -> int:
    """Number of distinct weight matrices among converged candidates (no hidden relabeling)."""
    reps: list[np.ndarray] = []
    for c in candidates:
        if not c.converged:
            continue
        if not any(np.allclose(c.weights.values, r, rtol=0, atol=atol) for r in reps):
            reps.append(c.weights.values)
    return len(reps)


CANDIDATE_COLUMNS = ("seed", "converged", "log_likelihood", "entropy", "residual", "outer_iters")


def write_candidates(path, candidates):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CANDIDATE_COLUMNS)
        for c in candidates:
            w.writerow(
                [
                    c.seed,
                    int(c.converged),
                    repr(c.log_likelihood),
                    repr(c.entropy),
                    repr(c.residual),
                    c.iterations,
                ]
            )
