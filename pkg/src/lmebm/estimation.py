"""EM with iterative-scaling M-steps (EM-IS) and the gradient-ascent EM baseline.

The scaling equation for feature i at a frozen distribution p is

    g_i(gamma) = sum_x f_i(x) exp(gamma * f#(x)) p(x) = eta_i

where f#(x) counts the active pairs of x.  With the all-pairs feature
catalog f#(x) = n(n-1)/2 for n active nodes, so g_i only needs the
per-feature mass grouped by active-node count.  We solve log g_i = log eta_i:
that function is convex and increasing with slope between 1 and N, which
keeps Newton well behaved; bisection covers the rest.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .model import (
    _FEATURE_TABLE_MAX_NODES,
    DEFAULT_WEIGHT_CLAMP,
    VISIBLE_VISIBLE,
    Dataset,
    ExactDistribution,
    MachineSpec,
    WeightMatrix,
    active_counts,
    energies,
    enumerate_distribution,
    entropy,
    log_likelihood,
    logsumexp,
    pair_features,
    state_matrix,
)

log = logging.getLogger(__name__)

CONVERGED = "converged"
ITERATION_CAP = "iteration cap"
STALLED = "stalled"


class RootBracketError(RuntimeError):
    """Scaling root could not be bracketed."""

    def __init__(self, feature, lo, hi, g_lo, g_hi, target):
        self.feature = feature
        self.lo, self.hi = lo, hi
        self.g_lo, self.g_hi = g_lo, g_hi
        self.target = target
        super().__init__(
            f"feature {feature}: root for target {target:.6g} not bracketed in "
            f"[{lo:.6g}, {hi:.6g}] (g={g_lo:.6g}, {g_hi:.6g})"
        )


@dataclass(frozen=True)
class EmisConfig:
    inner_steps: int = 4
    max_iter: int = 500
    tol: float = 1e-8
    feasibility_tol: float = 1e-6
    bracket_start: float = 1.0
    bracket_factor: float = 2.0
    max_expansions: int = 60
    root_tol: float = 1e-10
    newton: bool = True
    clamp: float = DEFAULT_WEIGHT_CLAMP
    stall_patience: int = 20

    def __post_init__(self):
        if self.inner_steps < 1:
            raise ValueError("inner_steps must be >= 1")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        for name in ("tol", "feasibility_tol", "bracket_start", "root_tol", "clamp"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.bracket_factor <= 1:
            raise ValueError("bracket_factor must exceed 1")

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


@dataclass(frozen=True)
class GradientConfig:
    step_size: float = 0.5
    max_iter: int = 5000
    tol: float = 1e-8
    feasibility_tol: float = 1e-6
    max_halvings: int = 40
    clamp: float = DEFAULT_WEIGHT_CLAMP
    stall_patience: int = 20

    def __post_init__(self):
        if self.step_size <= 0:
            raise ValueError("step_size must be positive")


@dataclass(frozen=True)
class ConstraintTargets:
    """Right-hand sides eta_i of the feature constraints, one per catalog pair."""

    values: np.ndarray
    snapshot: WeightMatrix

    def __post_init__(self):
        if np.any(self.values < -1e-15) or np.any(self.values > 1 + 1e-15):
            raise ValueError("constraint targets must lie in [0, 1]")

    def __len__(self):
        return self.values.size


@dataclass
class TraceRecord:
    outer_iter: int
    log_likelihood: float
    entropy: float
    max_residual: float
    q_value: float


@dataclass
class TrainTrace:
    records: list[TraceRecord] = field(default_factory=list)
    termination: str = ""
    saturated: set[int] = field(default_factory=set)
    message: str = ""

    CSV_COLUMNS = ("outer_iter", "log_likelihood", "entropy", "max_residual", "q_value")

    @property
    def converged(self) -> bool:
        return self.termination == CONVERGED

    @property
    def iterations(self) -> int:
        return self.records[-1].outer_iter if self.records else 0

    @property
    def log_likelihoods(self) -> np.ndarray:
        return np.array([r.log_likelihood for r in self.records])

    def is_monotone(self, slack: float = 1e-9) -> bool:
        return bool(np.all(np.diff(self.log_likelihoods) >= -slack))

    def to_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(self.CSV_COLUMNS)
            for r in self.records:
                writer.writerow(
                    [r.outer_iter]
                    + [repr(float(v)) for v in (r.log_likelihood, r.entropy, r.max_residual, r.q_value)]
                )


# ----------------------------------------------------------------------------
# E step and objective


def completed_weights(dist: ExactDistribution, data: Dataset) -> np.ndarray:
    """p~(y) p(z|y) over all joint states (the posterior-completed data)."""
    data.check_width(dist.spec)
    q = data.empirical[None, :] * np.exp(dist.log_conditional)
    return q.reshape(-1)


def _target_matrix(dist: ExactDistribution, data: Dataset) -> np.ndarray:
    x = state_matrix(dist.spec.num_nodes)
    q = completed_weights(dist, data)
    eta = x.T @ (q[:, None] * x)
    # visible-visible block from the data alone, no posterior rounding
    j = dist.spec.visible_count
    eta[:j, :j] = data.second_moments
    return eta


def targets_from(dist: ExactDistribution, data: Dataset) -> ConstraintTargets:
    eta = np.clip(_target_matrix(dist, data)[dist.spec.triu], 0.0, 1.0)
    return ConstraintTargets(eta, dist.weights)


def e_step(spec: MachineSpec, weights: WeightMatrix, data: Dataset) -> ConstraintTargets:
    return targets_from(enumerate_distribution(spec, weights), data)


def residuals(dist: ExactDistribution, data: Dataset) -> np.ndarray:
    """E_p[f_i] - eta_i(lambda), both sides at the distribution's own weights."""
    return dist.feature_expectations - targets_from(dist, data).values


def feasibility_residual(dist: ExactDistribution, data: Dataset) -> float:
    return float(np.max(np.abs(residuals(dist, data)), initial=0.0))


def q_from_targets(dist: ExactDistribution, targets: ConstraintTargets) -> float:
    return float(-dist.log_partition + np.dot(dist.weights.values, targets.values))


def q_value(spec: MachineSpec, weights: WeightMatrix, snapshot: WeightMatrix, data: Dataset) -> float:
    """Q(lambda, lambda') = -log Phi_lambda + sum_i lambda_i eta_i(lambda')."""
    return q_from_targets(enumerate_distribution(spec, weights), e_step(spec, snapshot, data))


def conditional_entropy_term(
    spec: MachineSpec, weights: WeightMatrix, snapshot: WeightMatrix, data: Dataset
) -> float:
    """H(lambda, lambda') = -sum_y p~(y) sum_z p_lambda'(z|y) log p_lambda(z|y)."""
    dist = enumerate_distribution(spec, weights)
    ref = dist if snapshot == weights else enumerate_distribution(spec, snapshot)
    q = completed_weights(ref, data).reshape(dist.log_conditional.shape)
    mask = q > 0
    return float(-np.sum(q[mask] * dist.log_conditional[mask]))


def q_gradient(spec: MachineSpec, weights, snapshot: WeightMatrix, data: Dataset) -> np.ndarray:
    """dQ/dLambda as a full M x M matrix.

    ``weights`` may be a WeightMatrix or any M x M array; the energy
    0.5 x^T Lambda x is differentiated entry by entry, so the result is
    directly comparable with finite differences of an unsymmetrised matrix.
    """
    matrix = weights.matrix if isinstance(weights, WeightMatrix) else np.asarray(weights, float)
    x = state_matrix(spec.num_nodes)
    e = energies(matrix, x)
    p = np.exp(e - logsumexp(e))
    model = x.T @ (p[:, None] * x)
    eta = _target_matrix(enumerate_distribution(spec, snapshot), data)
    return 0.5 * (eta - model)


def q_of_matrix(spec: MachineSpec, matrix, snapshot: WeightMatrix, data: Dataset) -> float:
    """Q for an arbitrary (possibly asymmetric) matrix, used for finite differences."""
    matrix = np.asarray(matrix, dtype=np.float64)
    e = energies(matrix, state_matrix(spec.num_nodes))
    eta = _target_matrix(enumerate_distribution(spec, snapshot), data)
    return float(-logsumexp(e) + 0.5 * np.sum(matrix * eta))


# ----------------------------------------------------------------------------
# Scaling roots


def _grouped_log_mass(dist: ExactDistribution) -> tuple[np.ndarray, np.ndarray]:
    """log sum_{x: n active} f_i(x) p(x) for each feature i and count n, plus f# per n."""
    m = dist.spec.num_nodes
    counts = active_counts(m)
    onehot = np.zeros((counts.size, m + 1))
    onehot[np.arange(counts.size), counts] = dist.probs
    if m <= _FEATURE_TABLE_MAX_NODES:
        mass = pair_features(m).T @ onehot  # (features, m + 1)
    else:
        x = state_matrix(m)
        iu = dist.spec.triu
        mass = np.stack(
            [(x.T @ (onehot[:, n, None] * x))[iu] for n in range(m + 1)], axis=1
        )
    n = np.arange(m + 1)
    with np.errstate(divide="ignore"):
        return np.log(mass), (n * (n - 1) / 2.0)


def _log_g(log_mass, pair_counts, gamma):
    return logsumexp(log_mass + gamma[:, None] * pair_counts[None, :], axis=1)


def _log_g_and_slope(log_mass, pair_counts, gamma):
    z = log_mass + gamma[:, None] * pair_counts[None, :]
    lg = logsumexp(z, axis=1)
    w = np.exp(z - lg[:, None])
    return lg, w @ pair_counts


def scaling_roots(
    dist: ExactDistribution,
    targets: np.ndarray,
    config: EmisConfig = EmisConfig(),
    features=None,
) -> tuple[np.ndarray, np.ndarray]:
    """Solve every scaling equation against the frozen distribution ``dist``.

    Returns (gamma, saturated).  Targets of exactly 0 or 1 drive the weight to
    the clamp instead of solving.
    """
    log_mass_all, pair_counts = _grouped_log_mass(dist)
    lam_all = dist.weights.values
    if features is None:
        features = np.arange(dist.spec.num_features)
    features = np.asarray(features, dtype=np.int64)
    targets = np.asarray(targets, dtype=np.float64)
    log_mass = log_mass_all[features]
    lam = lam_all[features]

    gamma = np.zeros(features.size)
    low_sat = targets <= 0.0
    high_sat = targets >= 1.0
    gamma[low_sat] = -config.clamp - lam[low_sat]
    gamma[high_sat] = config.clamp - lam[high_sat]
    saturated = low_sat | high_sat
    todo = ~saturated
    if not np.any(todo):
        return gamma, saturated

    lm = log_mass[todo]
    log_eta = np.log(targets[todo])
    k = lm.shape[0]

    def h(g):
        return _log_g(lm, pair_counts, g) - log_eta

    lo = np.full(k, -config.bracket_start)
    hi = np.full(k, config.bracket_start)
    h_lo, h_hi = h(lo), h(hi)
    step = np.full(k, config.bracket_start)
    for _ in range(config.max_expansions):
        need_lo = ~(h_lo <= 0)
        need_hi = ~(h_hi >= 0)
        if not (need_lo.any() or need_hi.any()):
            break
        step = step * config.bracket_factor
        lo = np.where(need_lo, lo - step, lo)
        hi = np.where(need_hi, hi + step, hi)
        h_lo, h_hi = h(lo), h(hi)
    bad = ~((h_lo <= 0) & (h_hi >= 0))
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        glo = float(np.exp(h_lo[i] + log_eta[i]))
        ghi = float(np.exp(h_hi[i] + log_eta[i]))
        raise RootBracketError(
            int(features[todo][i]), float(lo[i]), float(hi[i]), glo, ghi, float(targets[todo][i])
        )

    x = np.clip(np.zeros(k), lo, hi)
    active = np.ones(k, dtype=bool)
    for _ in range(400):
        hx, slope = _log_g_and_slope(lm[active], pair_counts, x[active])
        hx = hx - log_eta[active]
        idx = np.flatnonzero(active)
        # shrink brackets
        lo[idx] = np.where(hx < 0, x[idx], lo[idx])
        hi[idx] = np.where(hx > 0, x[idx], hi[idx])
        if config.newton:
            cand = x[idx] - hx / slope
            inside = (cand > lo[idx]) & (cand < hi[idx])
            new = np.where(inside, cand, 0.5 * (lo[idx] + hi[idx]))
        else:
            new = 0.5 * (lo[idx] + hi[idx])
        delta = np.abs(new - x[idx])
        x[idx] = new
        done = (delta <= config.root_tol) | (hx == 0) | (hi[idx] - lo[idx] <= config.root_tol)
        active[idx[done]] = False
        if not active.any():
            break
    gamma[todo] = x
    return gamma, saturated


def is_update_root(
    spec: MachineSpec,
    weights: WeightMatrix,
    index: int,
    target: float,
    config: EmisConfig = EmisConfig(),
) -> tuple[float, bool]:
    """Scaling step gamma for one feature; returns (gamma, saturated)."""
    if not 0 <= index < spec.num_features:
        raise IndexError(f"feature index {index} out of range")
    if not 0.0 <= target <= 1.0:
        raise ValueError("target must lie in [0, 1]")
    dist = enumerate_distribution(spec, weights)
    gamma, sat = scaling_roots(dist, np.array([target]), config, features=[index])
    return float(gamma[0]), bool(sat[0])


def scaling_function(dist: ExactDistribution, index: int, gamma: float) -> float:
    """g_i(gamma) by direct summation over every joint state."""
    x = state_matrix(dist.spec.num_nodes)
    a, b = dist.spec.pairs[index]
    n = x.sum(axis=1)
    fsharp = n * (n - 1) / 2
    return float(np.sum(x[:, a] * x[:, b] * np.exp(gamma * fsharp + dist.log_probs)))


# ----------------------------------------------------------------------------
# M step and the outer loops


@dataclass
class MStepResult:
    weights: WeightMatrix
    dist: ExactDistribution
    saturated: set[int]
    q_values: list[float]
    max_abs_residuals: list[float]


def run_m_step(
    dist: ExactDistribution, targets: ConstraintTargets, config: EmisConfig
) -> MStepResult:
    spec = dist.spec
    q_values = [q_from_targets(dist, targets)]
    gaps = [float(np.max(np.abs(dist.feature_expectations - targets.values), initial=0.0))]
    saturated: set[int] = set()
    for _ in range(config.inner_steps):
        gamma, sat = scaling_roots(dist, targets.values, config)
        saturated.update(int(i) for i in np.flatnonzero(sat))
        values = np.clip(dist.weights.values + gamma, -config.clamp, config.clamp)
        dist = enumerate_distribution(spec, WeightMatrix(values, spec.num_nodes, config.clamp))
        q_values.append(q_from_targets(dist, targets))
        gaps.append(float(np.max(np.abs(dist.feature_expectations - targets.values), initial=0.0)))
    return MStepResult(dist.weights, dist, saturated, q_values, gaps)


def m_step(
    spec: MachineSpec,
    weights: WeightMatrix,
    targets: ConstraintTargets,
    config: EmisConfig = EmisConfig(),
) -> WeightMatrix:
    """S rounds of parallel iterative scaling toward fixed targets."""
    return run_m_step(enumerate_distribution(spec, weights), targets, config).weights


def _record(trace, it, dist, data, q, resid):
    ll = log_likelihood(dist, data)
    trace.records.append(TraceRecord(it, ll, entropy(dist), resid, q))
    return ll


def em_is(
    spec: MachineSpec,
    init: WeightMatrix,
    data: Dataset,
    config: EmisConfig = EmisConfig(),
    verbose: bool = False,
    backend: str = "auto",
) -> tuple[WeightMatrix, TrainTrace]:
    """Alternate E and M steps until the likelihood is flat and the point is feasible.

    Row 0 of the trace describes the initial weights with q_value = Q(init, init);
    row j >= 1 carries Q(lambda^(j), lambda^(j-1)), the value the M step reached.

    ``backend`` is ``"numpy"`` (reference), ``"numba"`` (compiled loop, needs
    the pair-feature table) or ``"auto"``.
    """
    data.check_width(spec)
    if backend == "auto":
        backend = "numba" if spec.num_nodes <= _FEATURE_TABLE_MAX_NODES else "numpy"
    if backend == "numba":
        return _em_is_compiled(spec, init, data, config, verbose)
    if backend != "numpy":
        raise ValueError(f"unknown backend {backend!r}")
    trace = TrainTrace()
    dist = enumerate_distribution(spec, init)
    targets = targets_from(dist, data)
    resid = float(np.max(np.abs(dist.feature_expectations - targets.values), initial=0.0))
    ll = _record(trace, 0, dist, data, q_from_targets(dist, targets), resid)
    flat = 0
    for it in range(1, config.max_iter + 1):
        try:
            step = run_m_step(dist, targets, config)
        except RootBracketError as exc:
            trace.termination = STALLED
            trace.message = str(exc)
            return dist.weights, trace
        trace.saturated |= step.saturated
        q = step.q_values[-1]
        dist = step.dist
        targets = targets_from(dist, data)
        resid = float(np.max(np.abs(dist.feature_expectations - targets.values), initial=0.0))
        new_ll = _record(trace, it, dist, data, q, resid)
        if verbose:
            log.info("iter %d ll %.12f resid %.3e", it, new_ll, resid)
        small_change = abs(new_ll - ll) < config.tol
        ll = new_ll
        if small_change and resid <= config.feasibility_tol:
            trace.termination = CONVERGED
            return dist.weights, trace
        flat = flat + 1 if small_change else 0
        if flat >= config.stall_patience:
            trace.termination = STALLED
            return dist.weights, trace
    trace.termination = ITERATION_CAP
    return dist.weights, trace


def _em_is_compiled(spec, init, data, config, verbose):
    from . import _kernels

    m = spec.num_nodes
    features = np.ascontiguousarray(pair_features(m))
    n = np.arange(m + 1)
    j = spec.visible_count
    vv_mask = np.array([spec.feature_kind(i) == VISIBLE_VISIBLE for i in range(spec.num_features)])
    moments = np.zeros((m, m))
    moments[:j, :j] = data.second_moments
    vv_targets = np.where(vv_mask, np.clip(moments[spec.triu], 0.0, 1.0), 0.0)
    lam, rows, code, saturated, bad = _kernels.em_is_loop(
        features,
        np.ascontiguousarray(active_counts(m)),
        (n * (n - 1) / 2.0).astype(np.float64),
        np.array(init.values, dtype=np.float64),
        np.ascontiguousarray(data.empirical),
        2**j,
        2**spec.hidden_count,
        vv_mask,
        vv_targets,
        config.inner_steps,
        config.max_iter,
        config.tol,
        config.feasibility_tol,
        config.clamp,
        config.bracket_start,
        config.bracket_factor,
        config.max_expansions,
        config.root_tol,
        config.newton,
        config.stall_patience,
    )
    trace = TrainTrace(saturated={int(i) for i in np.flatnonzero(saturated)})
    for it, (ll, h, resid, q) in enumerate(rows):
        trace.records.append(TraceRecord(it, float(ll), float(h), float(resid), float(q)))
        if verbose:
            log.info("iter %d ll %.12f resid %.3e", it, ll, resid)
    weights = WeightMatrix(lam, m, config.clamp)
    if code == _kernels.BRACKET_FAILED:
        trace.termination = STALLED
        trace.message = f"feature {bad}: scaling root not bracketed"
    else:
        trace.termination = {
            _kernels.CONVERGED: CONVERGED,
            _kernels.ITERATION_CAP: ITERATION_CAP,
            _kernels.STALLED: STALLED,
        }[code]
    return weights, trace


def gradient_em(
    spec: MachineSpec,
    init: WeightMatrix,
    data: Dataset,
    config: GradientConfig = GradientConfig(),
    verbose: bool = False,
) -> tuple[WeightMatrix, TrainTrace]:
    """Generalised EM: one controlled gradient-ascent step on Q per E step.

    A step is accepted only if Q does not decrease; otherwise it is halved.
    """
    data.check_width(spec)
    m = spec.num_nodes
    trace = TrainTrace()
    dist = enumerate_distribution(spec, init)
    targets = targets_from(dist, data)
    resid = float(np.max(np.abs(dist.feature_expectations - targets.values), initial=0.0))
    ll = _record(trace, 0, dist, data, q_from_targets(dist, targets), resid)
    flat = 0
    for it in range(1, config.max_iter + 1):
        q0 = q_from_targets(dist, targets)
        # symmetric gradient: off-diagonal entries of dQ/dLambda, diagonal dropped
        grad = 0.5 * (targets.values - dist.feature_expectations)
        step = config.step_size
        new_dist, q = dist, q0
        for _ in range(config.max_halvings + 1):
            values = np.clip(dist.weights.values + step * grad, -config.clamp, config.clamp)
            cand = enumerate_distribution(spec, WeightMatrix(values, m, config.clamp))
            q_cand = q_from_targets(cand, targets)
            if q_cand >= q0:
                new_dist, q = cand, q_cand
                break
            step *= 0.5
        dist = new_dist
        targets = targets_from(dist, data)
        resid = float(np.max(np.abs(dist.feature_expectations - targets.values), initial=0.0))
        new_ll = _record(trace, it, dist, data, q, resid)
        if verbose:
            log.info("iter %d ll %.12f resid %.3e step %.3g", it, new_ll, resid, step)
        small_change = abs(new_ll - ll) < config.tol
        ll = new_ll
        if small_change and resid <= config.feasibility_tol:
            trace.termination = CONVERGED
            return dist.weights, trace
        flat = flat + 1 if small_change else 0
        if flat >= config.stall_patience:
            trace.termination = STALLED
            return dist.weights, trace
    trace.termination = ITERATION_CAP
    return dist.weights, trace


def load_config(path, cls=EmisConfig, overrides=None):
    """Read ``key = value`` lines (``#`` comments) into a config dataclass."""
    valid = {f.name: f for f in fields(cls)}
    values = {}
    lines = Path(path).read_text(encoding="utf-8").splitlines() if path else []
    items = []
    for lineno, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key = value")
        items.append((lineno, *line.split("=", 1)))
    for item in overrides or []:
        if "=" not in item:
            raise ValueError(f"override {item!r}: expected key=value")
        items.append((None, *item.split("=", 1)))
    for lineno, key, raw in items:
        key, raw = key.strip(), raw.strip()
        if key not in valid:
            where = f"{path}:{lineno}: " if lineno else ""
            raise ValueError(f"{where}unknown key {key!r}; valid keys: {', '.join(valid)}")
        default = getattr(cls(), key)
        if isinstance(default, bool):
            values[key] = raw.lower() in ("1", "true", "yes", "on")
        else:
            values[key] = type(default)(raw)
    return cls(**values)
