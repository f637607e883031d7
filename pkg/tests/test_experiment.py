import math

import numpy as np
import pytest

import oracles
from conftest import nested, random_weights
from lmebm.experiment import (
    DEFAULT_SIZES,
    ExperimentConfig,
    TrialResult,
    aggregate,
    cross_entropy_observed,
    make_scenarios,
    nondegenerate,
    run_experiment,
    scenario,
    trial_seeds,
    verdicts,
    write_aggregate,
    write_results,
)
from lmebm.model import MachineSpec, ShapeError, WeightMatrix, enumerate_distribution
from lmebm.selection import RestartPlan


class TestCrossEntropy:
    def test_identical(self, rng):
        spec = MachineSpec(5, 3)
        d = enumerate_distribution(spec, random_weights(8, rng))
        assert abs(cross_entropy_observed(d, d)) <= 1e-12

    def test_two_node_example(self):
        truth = enumerate_distribution(MachineSpec(2), WeightMatrix.zeros(2))
        est = enumerate_distribution(MachineSpec(2), WeightMatrix([math.log(2)], 2))
        expected = 0.75 * math.log(5 / 4) + 0.25 * math.log(5 / 8)
        assert cross_entropy_observed(truth, est) == pytest.approx(expected, abs=1e-14)
        assert expected == pytest.approx(0.0496, abs=5e-4)  # 0.04986

    def test_matches_oracle(self, rng):
        for l_true, l_est in [(3, 3), (5, 3), (1, 3), (0, 2)]:
            wt = random_weights(5 + l_true, rng)
            we = random_weights(5 + l_est, rng)
            dt = enumerate_distribution(MachineSpec(5, l_true), wt)
            de = enumerate_distribution(MachineSpec(5, l_est), we)
            ref = oracles.kl(nested(wt), l_true, nested(we), l_est, 5)
            assert cross_entropy_observed(dt, de) == pytest.approx(ref, abs=1e-10)
            assert cross_entropy_observed(dt, de) >= -1e-12

    def test_visible_mismatch(self):
        a = enumerate_distribution(MachineSpec(3, 1), WeightMatrix.zeros(4))
        b = enumerate_distribution(MachineSpec(4), WeightMatrix.zeros(4))
        with pytest.raises(ShapeError):
            cross_entropy_observed(a, b)


class TestScenarios:
    def test_hidden_counts(self):
        scen = make_scenarios(0)
        assert [c.name for c in scen] == ["exp1", "exp2", "exp3"]
        assert tuple(c.truth_spec.hidden_count for c in scen) == (3, 5, 1)
        assert all(c.estimator_spec == MachineSpec(5, 3) for c in scen)
        assert all(c.sizes == DEFAULT_SIZES and c.trials == 5 for c in scen)
        assert all(c.plan.restarts == 100 and c.plan.init_width == 1.0 for c in scen)

    def test_same_seed_same_truth(self):
        a, b, c = make_scenarios(4), make_scenarios(4), make_scenarios(5)
        assert [x.truth_weights for x in a] == [x.truth_weights for x in b]
        assert [x.truth_weights for x in a] != [x.truth_weights for x in c]

    def test_truths_nondegenerate(self):
        for seed in range(5):
            for cfg in make_scenarios(seed):
                d = enumerate_distribution(cfg.truth_spec, cfg.truth_weights)
                assert nondegenerate(d)
                assert np.all(np.abs(cfg.truth_weights.values) <= 2.0)

    def test_nondegenerate_rejects_extreme(self):
        spec = MachineSpec(2)
        assert nondegenerate(enumerate_distribution(spec, WeightMatrix.zeros(2)))
        # strong positive coupling piles mass on (1, 1): each bit is on with probability ~1
        assert not nondegenerate(enumerate_distribution(spec, WeightMatrix([12.0], 2)))

    def test_unknown_scenario(self):
        with pytest.raises(KeyError, match="exp1, exp2, exp3"):
            scenario("exp4")

    def test_config_validation(self):
        with pytest.raises(ValueError):
            ExperimentConfig("x", MachineSpec(4, 1), WeightMatrix.zeros(5))
        with pytest.raises(ValueError):
            ExperimentConfig("x", MachineSpec(5, 1), WeightMatrix.zeros(6), trials=0)

    def test_trial_seeds_distinct(self):
        seeds = {trial_seeds(0, t, k) for t in (50, 100) for k in range(5)}
        assert len(seeds) == 10
        assert trial_seeds(3, 50, 1) == trial_seeds(3, 50, 1)


class TestAggregate:
    def _results(self, values):
        return [
            TrialResult("s", 50, i, ce_lme=v, ce_mle=v + 1, ll_lme=-2.0, ll_mle=-1.0, entropy_lme=5.0, entropy_mle=4.0)
            for i, v in enumerate(values)
        ]

    def test_five_trials(self):
        summary = aggregate(self._results([1, 2, 3, 4, 5]))
        lme = next(s for s in summary if s.method == "lme")
        assert lme.mean_ce == 3.0
        assert lme.std_ce == pytest.approx(1.5811, abs=1e-4)
        assert lme.mean_ll == -2.0 and lme.mean_entropy == 5.0

    def test_single_trial(self):
        summary = aggregate(self._results([0.7]))
        assert [(s.method, s.mean_ce, s.std_ce) for s in summary] == [("lme", 0.7, 0.0), ("mle", 1.7, 0.0)]

    def test_failed_trials_skipped(self):
        results = self._results([1.0, 3.0]) + [TrialResult("s", 50, 2, error="none converged")]
        lme = aggregate(results)[0]
        assert lme.mean_ce == 2.0 and lme.trials == 2

    def test_empty(self):
        with pytest.raises(ValueError):
            aggregate([])

    def test_verdict_lines(self):
        lines = verdicts(aggregate(self._results([1.0, 2.0])))
        assert lines == ["s T=50: mean_ce lme 1.500000 mle 2.500000 -> LME <= MLE"]

    def test_csv_columns(self, tmp_path):
        results = self._results([1.0, 2.0])
        write_results(tmp_path / "r.csv", results)
        write_aggregate(tmp_path / "a.csv", aggregate(results))
        r = (tmp_path / "r.csv").read_text().splitlines()
        a = (tmp_path / "a.csv").read_text().splitlines()
        assert r[0] == "scenario,sample_size,trial,method,cross_entropy,log_likelihood,entropy,converged_candidates"
        assert a[0] == "scenario,sample_size,method,mean_ce,std_ce,mean_ll,mean_entropy"
        assert len(r) == 1 + 2 * 2 and len(a) == 1 + 2


class TestRunExperiment:
    def test_uniform_truth_recovered(self):
        cfg = ExperimentConfig(
            "flat",
            MachineSpec(5, 3),
            WeightMatrix.zeros(8),
            sizes=(1000,),
            trials=1,
            plan=RestartPlan(4),
        )
        (res,) = run_experiment(cfg)
        assert not res.failed
        assert res.ce_lme < 0.05 and res.ce_mle < 0.05

    def test_deterministic_and_directional(self):
        cfg = scenario("exp3", 1, sizes=(50,), trials=2, plan=RestartPlan(3))
        a, b = run_experiment(cfg), run_experiment(cfg)
        assert a == b
        for r in a:
            assert r.ll_mle >= r.ll_lme and r.entropy_lme >= r.entropy_mle
            assert r.ce_lme >= -1e-12 and r.ce_mle >= -1e-12
            assert r.candidates == 3
