"""Boltzmann machine data model and exact inference by enumeration.

A configuration x in {0,1}^M is encoded as an M-bit integer with node ``a``
at bit ``a``; visible nodes occupy bits ``0..J-1``.  With that encoding the
joint table reshapes to ``(2**L, 2**J)`` with hidden index on the first axis
and observed index on the second, which is how every marginal and
conditional below is computed.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property, lru_cache

import numpy as np

DEFAULT_MAX_NODES = 20
DEFAULT_WEIGHT_CLAMP = 30.0

VISIBLE_VISIBLE = "vv"
VISIBLE_HIDDEN = "vh"
HIDDEN_HIDDEN = "hh"


class CapacityError(ValueError):
    """Machine too large for exact enumeration."""


class ShapeError(ValueError):
    """Observation vector or dataset has the wrong width or non-binary entries."""


@lru_cache(maxsize=32)
def state_matrix(num_nodes: int) -> np.ndarray:
    """All 2**M configurations as rows of a float array, row index = state code."""
    codes = np.arange(2**num_nodes, dtype=np.int64)
    bits = (codes[:, None] >> np.arange(num_nodes)) & 1
    out = bits.astype(np.float64)
    out.flags.writeable = False
    return out


@lru_cache(maxsize=32)
def pair_features(num_nodes: int) -> np.ndarray:
    """0/1 matrix of every pair feature (catalog order) at every state."""
    x = state_matrix(num_nodes)
    a, b = np.triu_indices(num_nodes, k=1)
    out = x[:, a] * x[:, b]
    out.flags.writeable = False
    return out


@lru_cache(maxsize=32)
def active_counts(num_nodes: int) -> np.ndarray:
    out = state_matrix(num_nodes).sum(axis=1).astype(np.int64)
    out.flags.writeable = False
    return out


def logsumexp(a, axis=None):
    """Plain numpy log-sum-exp; -inf entries are allowed, all -inf gives -inf."""
    a = np.asarray(a, dtype=np.float64)
    top = np.max(a, axis=axis, keepdims=True)
    top = np.where(np.isfinite(top), top, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(a - top), axis=axis, keepdims=True)) + top
    if axis is None:
        return float(out.reshape(()))
    return np.squeeze(out, axis=axis)


# pair feature table is materialised only up to this size
_FEATURE_TABLE_MAX_NODES = 14


@dataclass(frozen=True)
class MachineSpec:
    visible_count: int
    hidden_count: int = 0
    max_nodes: int = DEFAULT_MAX_NODES

    def __post_init__(self):
        if self.visible_count < 1:
            raise ValueError("visible_count must be positive")
        if self.hidden_count < 0:
            raise ValueError("hidden_count must be non-negative")
        if self.num_nodes > self.max_nodes:
            raise CapacityError(
                f"machine has {self.num_nodes} nodes, enumeration cap is {self.max_nodes}"
            )

    @property
    def num_nodes(self) -> int:
        return self.visible_count + self.hidden_count

    @property
    def num_features(self) -> int:
        m = self.num_nodes
        return m * (m - 1) // 2

    @cached_property
    def pairs(self) -> tuple[tuple[int, int], ...]:
        """Feature catalog: row-major strict upper triangle."""
        m = self.num_nodes
        return tuple((a, b) for a in range(m) for b in range(a + 1, m))

    @cached_property
    def triu(self) -> tuple[np.ndarray, np.ndarray]:
        return np.triu_indices(self.num_nodes, k=1)

    def feature_kind(self, index: int) -> str:
        a, b = self.pairs[index]
        j = self.visible_count
        if b < j:
            return VISIBLE_VISIBLE
        if a < j:
            return VISIBLE_HIDDEN
        return HIDDEN_HIDDEN

    def feature_index(self, a: int, b: int) -> int:
        if a > b:
            a, b = b, a
        if not (0 <= a < b < self.num_nodes):
            raise IndexError(f"no feature for pair ({a}, {b})")
        m = self.num_nodes
        return a * m - a * (a + 1) // 2 + (b - a - 1)


class WeightMatrix:
    """Symmetric, zero-diagonal matrix of pairwise weights.

    Stored as the strict upper triangle (one value per feature, catalog
    order); the full matrix is rebuilt on access.
    """

    __slots__ = ("_values", "num_nodes")

    def __init__(self, values, num_nodes: int, clamp: float = DEFAULT_WEIGHT_CLAMP):
        values = np.array(values, dtype=np.float64).reshape(-1)
        if values.size != num_nodes * (num_nodes - 1) // 2:
            raise ValueError(
                f"expected {num_nodes * (num_nodes - 1) // 2} weights, got {values.size}"
            )
        if not np.all(np.isfinite(values)):
            raise ValueError("weights must be finite")
        if np.any(np.abs(values) > clamp):
            raise ValueError(f"weights exceed clamp {clamp}")
        values.flags.writeable = False
        self._values = values
        self.num_nodes = num_nodes

    @classmethod
    def zeros(cls, num_nodes: int) -> WeightMatrix:
        return cls(np.zeros(num_nodes * (num_nodes - 1) // 2), num_nodes)

    @classmethod
    def from_matrix(cls, matrix, clamp: float = DEFAULT_WEIGHT_CLAMP) -> WeightMatrix:
        """Take the upper triangle of ``matrix``; the rest is ignored."""
        matrix = np.asarray(matrix, dtype=np.float64)
        m = matrix.shape[0]
        return cls(matrix[np.triu_indices(m, k=1)], m, clamp=clamp)

    @classmethod
    def random(cls, num_nodes: int, width: float, rng: np.random.Generator) -> WeightMatrix:
        n = num_nodes * (num_nodes - 1) // 2
        return cls(rng.uniform(-width, width, size=n), num_nodes)

    @property
    def values(self) -> np.ndarray:
        return self._values

    @property
    def matrix(self) -> np.ndarray:
        m = self.num_nodes
        out = np.zeros((m, m))
        iu = np.triu_indices(m, k=1)
        out[iu] = self._values
        return out + out.T

    def __getitem__(self, ab: tuple[int, int]) -> float:
        return float(self.matrix[ab])

    def __eq__(self, other):
        if not isinstance(other, WeightMatrix):
            return NotImplemented
        return self.num_nodes == other.num_nodes and np.array_equal(self._values, other._values)

    def __hash__(self):
        return hash((self.num_nodes, self._values.tobytes()))

    def __repr__(self):
        return f"WeightMatrix(num_nodes={self.num_nodes}, values={self._values.tolist()!r})"


def energies(weights: np.ndarray, states: np.ndarray) -> np.ndarray:
    """0.5 * x^T W x for every row of ``states``; ``weights`` may be any M x M matrix."""
    return 0.5 * np.sum((states @ weights) * states, axis=1)


def _state_energies(weights: WeightMatrix) -> np.ndarray:
    m = weights.num_nodes
    if m <= _FEATURE_TABLE_MAX_NODES:
        return pair_features(m) @ weights.values
    return energies(weights.matrix, state_matrix(m))


@dataclass(frozen=True, eq=False)
class ExactDistribution:
    """Full joint table of a Boltzmann machine, kept in the log domain."""

    spec: MachineSpec
    weights: WeightMatrix
    log_probs: np.ndarray = field(repr=False)
    log_partition: float

    @cached_property
    def probs(self) -> np.ndarray:
        out = np.exp(self.log_probs)
        out.flags.writeable = False
        return out

    @cached_property
    def log_table(self) -> np.ndarray:
        """Log joint reshaped to (hidden state, observed state)."""
        return self.log_probs.reshape(2**self.spec.hidden_count, 2**self.spec.visible_count)

    @cached_property
    def log_marginal(self) -> np.ndarray:
        """log p(y) for every observed code y."""
        return logsumexp(self.log_table, axis=0)

    @cached_property
    def marginal(self) -> np.ndarray:
        return np.exp(self.log_marginal)

    @cached_property
    def log_conditional(self) -> np.ndarray:
        """log p(z|y) as a (hidden state, observed state) table."""
        return self.log_table - self.log_marginal[None, :]

    @cached_property
    def second_moments(self) -> np.ndarray:
        """E[x x^T]; off-diagonal entries are the pair feature expectations."""
        x = state_matrix(self.spec.num_nodes)
        return x.T @ (self.probs[:, None] * x)

    @cached_property
    def feature_expectations(self) -> np.ndarray:
        m = self.spec.num_nodes
        if m <= _FEATURE_TABLE_MAX_NODES:
            return pair_features(m).T @ self.probs
        return self.second_moments[self.spec.triu]


def enumerate_distribution(spec: MachineSpec, weights: WeightMatrix) -> ExactDistribution:
    if spec.num_nodes > spec.max_nodes:
        raise CapacityError(
            f"machine has {spec.num_nodes} nodes, enumeration cap is {spec.max_nodes}"
        )
    if weights.num_nodes != spec.num_nodes:
        raise ShapeError(f"weights are {weights.num_nodes}-node, spec is {spec.num_nodes}-node")
    e = _state_energies(weights)
    log_z = logsumexp(e)
    log_probs = e - log_z
    log_probs.flags.writeable = False
    return ExactDistribution(spec, weights, log_probs, log_z)


def encode(bits) -> int:
    """Binary vector -> integer code with element ``a`` at bit ``a``."""
    return int(sum(int(b) << a for a, b in enumerate(bits)))


def decode(code: int, width: int) -> np.ndarray:
    return (code >> np.arange(width)) & 1


def _observed_code(spec: MachineSpec, y) -> int:
    y = np.asarray(y)
    if y.ndim != 1 or y.size != spec.visible_count:
        raise ShapeError(f"expected a vector of {spec.visible_count} bits, got shape {y.shape}")
    if not np.all((y == 0) | (y == 1)):
        raise ShapeError(f"non-binary entries in {y.tolist()}")
    return encode(y)


def observed_marginal(dist: ExactDistribution, y) -> float:
    return float(dist.marginal[_observed_code(dist.spec, y)])


def hidden_conditional(dist: ExactDistribution, y) -> np.ndarray:
    """p(z|y) over the 2**L hidden codes."""
    return np.exp(dist.log_conditional[:, _observed_code(dist.spec, y)])


def entropy(dist: ExactDistribution) -> float:
    p = dist.probs
    mask = p > 0
    return float(-np.sum(p[mask] * dist.log_probs[mask]))


def feature_expectation(dist: ExactDistribution, index: int) -> float:
    if not 0 <= index < dist.spec.num_features:
        raise IndexError(f"feature index {index} out of range [0, {dist.spec.num_features})")
    a, b = dist.spec.pairs[index]
    return float(dist.second_moments[a, b])


class Dataset:
    """Observed binary vectors plus an empirical weight per row."""

    def __init__(self, observations, weights=None):
        obs = np.asarray(observations)
        if obs.ndim != 2 or obs.shape[0] == 0 or obs.shape[1] == 0:
            raise ShapeError(f"observations must be a non-empty 2-d array, got shape {obs.shape}")
        if not np.all((obs == 0) | (obs == 1)):
            raise ShapeError("observations must be 0/1")
        obs = obs.astype(np.int8)
        if weights is None:
            weights = np.full(obs.shape[0], 1.0 / obs.shape[0])
        weights = np.asarray(weights, dtype=np.float64)
        if weights.shape != (obs.shape[0],):
            raise ShapeError("one weight per observation required")
        if np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-12:
            raise ValueError("empirical weights must be non-negative and sum to 1")
        obs.flags.writeable = False
        weights.flags.writeable = False
        self.observations = obs
        self.weights = weights

    @property
    def width(self) -> int:
        return self.observations.shape[1]

    def __len__(self):
        return self.observations.shape[0]

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return np.array_equal(self.observations, other.observations) and np.array_equal(
            self.weights, other.weights
        )

    @cached_property
    def codes(self) -> np.ndarray:
        return self.observations.astype(np.int64) @ (1 << np.arange(self.width, dtype=np.int64))

    @cached_property
    def empirical(self) -> np.ndarray:
        """p~(y) over all 2**J observed codes."""
        return np.bincount(self.codes, weights=self.weights, minlength=2**self.width)

    @cached_property
    def second_moments(self) -> np.ndarray:
        """sum_t w_t y_t y_t^T, the J x J raw second moments of the data."""
        obs = self.observations.astype(np.float64)
        out = obs.T @ (self.weights[:, None] * obs)
        out.flags.writeable = False
        return out

    def check_width(self, spec: MachineSpec):
        if self.width != spec.visible_count:
            raise ShapeError(
                f"dataset has width {self.width}, machine has {spec.visible_count} visible nodes"
            )


def log_likelihood(dist: ExactDistribution, data: Dataset) -> float:
    data.check_width(dist.spec)
    emp = data.empirical
    mask = emp > 0
    return float(np.dot(emp[mask], dist.log_marginal[mask]))


def sample_observed(dist: ExactDistribution, count: int, seed) -> Dataset:
    """Draw ``count`` observed vectors i.i.d. from p(y) by inverse CDF."""
    if count < 1:
        raise ValueError("count must be at least 1")
    rng = np.random.default_rng(seed)
    cdf = np.cumsum(dist.marginal)
    cdf /= cdf[-1]
    codes = np.searchsorted(cdf, rng.random(count), side="right")
    codes = np.minimum(codes, cdf.size - 1)
    j = dist.spec.visible_count
    return Dataset((codes[:, None] >> np.arange(j)) & 1)
