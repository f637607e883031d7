import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from conftest import nested, random_weights
from lmebm.estimation import (
    CONVERGED,
    ITERATION_CAP,
    STALLED,
    ConstraintTargets,
    EmisConfig,
    GradientConfig,
    conditional_entropy_term,
    e_step,
    em_is,
    feasibility_residual,
    gradient_em,
    is_update_root,
    load_config,
    m_step,
    q_gradient,
    q_of_matrix,
    q_value,
    run_m_step,
    scaling_function,
)
from lmebm.experiment import EXPERIMENT_EMIS
from lmebm.model import (
    Dataset,
    MachineSpec,
    ShapeError,
    WeightMatrix,
    entropy,
    enumerate_distribution,
    log_likelihood,
    sample_observed,
)

LN2 = math.log(2)


def instance(rng, j=5, l=3, t=40, scale=1.5):
    spec = MachineSpec(j, l)
    w = random_weights(spec.num_nodes, rng, scale)
    data = Dataset(rng.integers(0, 2, size=(t, j)))
    return spec, w, data


def sampled_instance(seed, t=100):
    rng = np.random.default_rng(seed)
    spec = MachineSpec(5, 3)
    truth = random_weights(8, rng, 2.0)
    data = sample_observed(enumerate_distribution(spec, truth), t, seed)
    return spec, data


class TestEStep:
    def test_zero_weights(self, rng):
        spec = MachineSpec(4, 2)
        rows = rng.integers(0, 2, size=(25, 4))
        eta = e_step(spec, WeightMatrix.zeros(6), Dataset(rows)).values
        means = rows.mean(axis=0)
        for i, (a, b) in enumerate(spec.pairs):
            kind = spec.feature_kind(i)
            if kind == "vh":
                assert eta[i] == pytest.approx(means[a] / 2, abs=1e-15)
            elif kind == "hh":
                assert eta[i] == pytest.approx(0.25, abs=1e-15)
            else:
                assert eta[i] == pytest.approx(np.mean(rows[:, a] * rows[:, b]), abs=1e-15)

    def test_all_ones(self):
        spec = MachineSpec(2, 1)
        eta = e_step(spec, WeightMatrix.zeros(3), Dataset([[1, 1]] * 6)).values
        np.testing.assert_allclose(eta, [1.0, 0.5, 0.5], atol=1e-15)

    def test_matches_oracle(self, rng):
        for _ in range(3):
            spec, w, data = instance(rng)
            eta = e_step(spec, w, data).values
            ref = oracles.targets(nested(w), 5, 3, data.observations.tolist())
            np.testing.assert_allclose(eta, [ref[p] for p in spec.pairs], rtol=0, atol=1e-12)

    def test_visible_targets_ignore_weights(self, rng):
        spec, w, data = instance(rng)
        vv = [i for i in range(spec.num_features) if spec.feature_kind(i) == "vv"]
        a = e_step(spec, w, data).values[vv]
        b = e_step(spec, random_weights(8, rng, 4.0), data).values[vv]
        assert np.array_equal(a, b)

    def test_width_mismatch(self):
        with pytest.raises(ShapeError):
            e_step(MachineSpec(3, 1), WeightMatrix.zeros(4), Dataset([[0, 1]]))


class TestScalingRoot:
    def test_fixed_point(self, rng):
        spec, w, _ = instance(rng)
        d = enumerate_distribution(spec, w)
        for i in (0, 7, 27):
            gamma, sat = is_update_root(spec, w, i, float(d.feature_expectations[i]))
            assert not sat
            assert abs(gamma) < 1e-9

    def test_two_node_single_round(self):
        # one root of sum_x f(x) e^{gamma f#(x)} p(x) = 2/5 at Lambda = 0: e^gamma / 4 = 2/5
        spec = MachineSpec(2)
        gamma, _ = is_update_root(spec, WeightMatrix.zeros(2), 0, 0.4)
        assert gamma == pytest.approx(math.log(1.6), abs=1e-10)

    def test_two_node_rounds_reach_closed_form(self):
        # repeated rounds land on e^lambda / (3 + e^lambda) = 2/5, i.e. lambda = ln 2
        spec = MachineSpec(2)
        targets = ConstraintTargets(np.array([0.4]), WeightMatrix.zeros(2))
        w = m_step(spec, WeightMatrix.zeros(2), targets, EmisConfig(inner_steps=60))
        assert w.values[0] == pytest.approx(LN2, abs=1e-9)

    def test_residual_against_oracle(self, rng):
        spec, w, _ = instance(rng)
        d = enumerate_distribution(spec, w)
        for i in range(spec.num_features):
            target = float(rng.uniform(0.01, 0.9))
            gamma, sat = is_update_root(spec, w, i, target)
            assert not sat
            a, b = spec.pairs[i]
            assert abs(oracles.scaling_g(nested(w), 8, a, b, gamma) - target) <= 1e-9
            assert abs(scaling_function(d, i, gamma) - target) <= 1e-9

    def test_saturation(self):
        spec = MachineSpec(3)
        w = WeightMatrix([0.5, -1.0, 2.0], 3)
        gamma, sat = is_update_root(spec, w, 1, 0.0)
        assert sat and gamma == pytest.approx(-30 + 1.0)
        gamma, sat = is_update_root(spec, w, 2, 1.0)
        assert sat and gamma == pytest.approx(30 - 2.0)

    def test_bisection_only_agrees_with_newton(self, rng):
        spec, w, _ = instance(rng)
        for i in (3, 11):
            g1, _ = is_update_root(spec, w, i, 0.3)
            g2, _ = is_update_root(spec, w, i, 0.3, EmisConfig(newton=False))
            assert g1 == pytest.approx(g2, abs=1e-9)

    def test_bad_arguments(self):
        spec = MachineSpec(2)
        with pytest.raises(ValueError):
            is_update_root(spec, WeightMatrix.zeros(2), 0, 1.5)
        with pytest.raises(IndexError):
            is_update_root(spec, WeightMatrix.zeros(2), 1, 0.5)


class TestMStep:
    def test_feasible_fixed_point(self, rng):
        spec, w, _ = instance(rng)
        d = enumerate_distribution(spec, w)
        targets = ConstraintTargets(d.feature_expectations.copy(), w)
        out = m_step(spec, w, targets)
        np.testing.assert_allclose(out.values, w.values, atol=1e-9)

    def test_more_rounds_higher_q(self, rng):
        for _ in range(5):
            spec, w, data = instance(rng)
            targets = e_step(spec, w, data)
            q1 = q_value(spec, m_step(spec, w, targets, EmisConfig(inner_steps=1)), w, data)
            q4 = q_value(spec, m_step(spec, w, targets, EmisConfig(inner_steps=4)), w, data)
            assert q4 >= q1 - 1e-9

    def test_rounds_monotone(self, rng):
        spec, w, data = instance(rng)
        targets = e_step(spec, w, data)
        res = run_m_step(enumerate_distribution(spec, w), targets, EmisConfig(inner_steps=50))
        assert np.all(np.diff(res.q_values) >= -1e-9)
        assert np.all(np.diff(res.max_abs_residuals) <= 1e-12)


class TestQFunction:
    def test_zero_weights(self):
        spec = MachineSpec(2, 1)
        z = WeightMatrix.zeros(3)
        assert q_value(spec, z, z, Dataset([[0, 1], [1, 1]])) == pytest.approx(-3 * LN2, abs=1e-14)

    def test_decomposition(self, rng):
        for _ in range(5):
            spec, w, data = instance(rng)
            snap = random_weights(8, rng)
            ll = log_likelihood(enumerate_distribution(spec, w), data)
            total = q_value(spec, w, snap, data) + conditional_entropy_term(spec, w, snap, data)
            assert ll == pytest.approx(total, abs=1e-10)
            assert conditional_entropy_term(spec, w, w, data) >= 0

    def test_identity_gap_is_weighted_residual(self, rng):
        # Q(l, l) + H(p_l) = sum_i l_i (eta_i - E[f_i]), which vanishes at feasible points
        spec, w, data = instance(rng)
        d = enumerate_distribution(spec, w)
        eta = e_step(spec, w, data).values
        lhs = q_value(spec, w, w, data) + entropy(d)
        assert lhs == pytest.approx(np.dot(w.values, eta - d.feature_expectations), abs=1e-10)


class TestGradient:
    def test_finite_differences(self, rng):
        h = 1e-5
        for _ in range(3):
            spec, w, data = instance(rng)
            snap = random_weights(8, rng)
            base = w.matrix
            grad = q_gradient(spec, w, snap, data)
            fd = np.zeros_like(base)
            for a in range(8):
                for b in range(8):
                    up, dn = base.copy(), base.copy()
                    up[a, b] += h
                    dn[a, b] -= h
                    fd[a, b] = (q_of_matrix(spec, up, snap, data) - q_of_matrix(spec, dn, snap, data)) / (2 * h)
            assert np.max(np.abs(grad - fd)) <= 1e-5

    def test_gradient_em_monotone_q(self):
        spec, data = sampled_instance(3)
        init = WeightMatrix.random(8, 1.0, np.random.default_rng(8))
        _, trace = gradient_em(spec, init, data, GradientConfig(max_iter=200))
        assert trace.is_monotone()
        assert trace.termination in (CONVERGED, ITERATION_CAP, STALLED)

    def test_step_size_positive(self):
        with pytest.raises(ValueError):
            GradientConfig(step_size=0)


class TestEmIs:
    def test_balanced_data_stationary(self):
        data = Dataset([[0, 0], [1, 0], [0, 1], [1, 1]] * 5)
        w, trace = em_is(MachineSpec(2, 1), WeightMatrix.zeros(3), data)
        assert trace.termination == CONVERGED and trace.iterations == 1
        np.testing.assert_allclose(w.values, 0, atol=1e-12)

    def test_uniform_sample_stays_near_zero(self):
        spec = MachineSpec(5, 3)
        data = sample_observed(enumerate_distribution(spec, WeightMatrix.zeros(8)), 100_000, 1)
        w, trace = em_is(spec, WeightMatrix.zeros(8), data)
        assert np.max(np.abs(w.values)) < 0.05
        assert trace.is_monotone()

    def test_default_run_is_monotone(self):
        spec, data = sampled_instance(5)
        init = WeightMatrix.random(8, 1.0, np.random.default_rng(1))
        w, trace = em_is(spec, init, data)
        assert trace.is_monotone(1e-9)
        assert trace.termination in (CONVERGED, ITERATION_CAP, STALLED)
        if trace.converged:
            assert feasibility_residual(enumerate_distribution(spec, w), data) <= 1e-6

    def test_multimodal_restarts(self):
        spec, data = sampled_instance(0)
        finals = []
        for seed in (1, 2, 3, 4):
            init = WeightMatrix.random(8, 1.0, np.random.default_rng(seed))
            _, trace = em_is(spec, init, data, EXPERIMENT_EMIS)
            assert trace.converged and trace.is_monotone()
            finals.append(trace.records[-1].log_likelihood)
        assert all(np.isfinite(finals))

    def test_compiled_matches_reference(self):
        spec, data = sampled_instance(2)
        init = WeightMatrix.random(8, 1.0, np.random.default_rng(4))
        cfg = EmisConfig(max_iter=60)
        w1, t1 = em_is(spec, init, data, cfg, backend="numpy")
        w2, t2 = em_is(spec, init, data, cfg, backend="numba")
        assert t1.termination == t2.termination
        assert len(t1.records) == len(t2.records)
        np.testing.assert_allclose(w1.values, w2.values, atol=1e-10)
        np.testing.assert_allclose(t1.log_likelihoods, t2.log_likelihoods, atol=1e-10)
        np.testing.assert_allclose(
            [r.q_value for r in t1.records], [r.q_value for r in t2.records], atol=1e-10
        )

    def test_trace_csv(self, tmp_path):
        spec, data = sampled_instance(2)
        _, trace = em_is(spec, WeightMatrix.zeros(8), data, EmisConfig(max_iter=5))
        trace.to_csv(tmp_path / "t.csv")
        lines = (tmp_path / "t.csv").read_text().splitlines()
        assert lines[0] == "outer_iter,log_likelihood,entropy,max_residual,q_value"
        assert len(lines) == len(trace.records) + 1
        assert float(lines[-1].split(",")[1]) == trace.records[-1].log_likelihood

    def test_unknown_backend(self):
        with pytest.raises(ValueError):
            em_is(MachineSpec(2), WeightMatrix.zeros(2), Dataset([[0, 1]]), backend="gpu")


class TestConfig:
    def test_defaults(self):
        c = EmisConfig()
        assert (c.inner_steps, c.max_iter, c.tol, c.feasibility_tol) == (4, 500, 1e-8, 1e-6)
        assert (c.bracket_start, c.bracket_factor, c.max_expansions, c.root_tol) == (1.0, 2.0, 60, 1e-10)
        assert c.newton and c.clamp == 30

    @pytest.mark.parametrize("kw", [{"inner_steps": 0}, {"tol": 0}, {"feasibility_tol": -1}])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            EmisConfig(**kw)

    def test_file_and_overrides(self, tmp_path):
        p = tmp_path / "emis.cfg"
        p.write_text("# comment\ninner_steps = 2\nnewton = false\ntol = 1e-6  # trailing\n")
        c = load_config(p, overrides=["max_iter=7"])
        assert (c.inner_steps, c.newton, c.tol, c.max_iter) == (2, False, 1e-6, 7)

    def test_unknown_key_lists_valid(self, tmp_path):
        p = tmp_path / "emis.cfg"
        p.write_text("inner_step = 2\n")
        with pytest.raises(ValueError, match="valid keys: inner_steps"):
            load_config(p)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.001, 0.999))
def test_root_residual_property(seed, target):
    rng = np.random.default_rng(seed)
    spec = MachineSpec(3, 2)
    w = random_weights(5, rng, 3.0)
    i = int(rng.integers(spec.num_features))
    gamma, sat = is_update_root(spec, w, i, target)
    d = enumerate_distribution(spec, w)
    if not sat:
        assert abs(scaling_function(d, i, gamma) - target) <= 1e-9


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_em_is_monotone_property(seed):
    rng = np.random.default_rng(seed)
    spec = MachineSpec(3, 2)
    data = Dataset(rng.integers(0, 2, size=(int(rng.integers(5, 40)), 3)))
    _, trace = em_is(spec, random_weights(5, rng, 2.0), data, EmisConfig(max_iter=100))
    assert trace.is_monotone(1e-9)
