"""Seeded synthetic feature-skew data and node populations"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from ssaflsim.errors import BadSpec
from ssaflsim.fl_core import LocalDataset
from ssaflsim.intent_core import ActionItem, Goal, RelationalOp, StrategyTuple, TimeWindow
from ssaflsim.similarity_engine import LatencyClass, NodeProfile

logger = logging.getLogger(__name__)

ACTION_VOCABULARY = (
    'qos_adjustment',
    'bandwidth_allocation',
    'route_update',
    'rate_limit',
    'priority_queue',
    'load_balance',
    'power_saving',
    'sensor_resampling',
)

# Canonical goal thresholds that pool strategies perturb
CANONICAL_GOALS = (
    ('latency', RelationalOp.LT, 15.0),
    ('throughput', RelationalOp.GEQ, 100.0),
    ('packet_loss', RelationalOp.LT, 0.01),
    ('jitter', RelationalOp.LEQ, 5.0),
    ('energy', RelationalOp.LT, 50.0),
)

ROUND_ROBIN = (LatencyClass.FAST, LatencyClass.MEDIUM, LatencyClass.SLOW)


@dataclass(frozen=True)
class DataSpec:
    """Synthetic benchmark shape: nodes, sizes, skew and noise"""

    n_nodes: int = 10
    samples_per_node: Tuple[int, int] = (200, 400)
    input_dim: int = 16
    context_shift: float = 1.0
    noise_sd: float = 0.02
    test_samples: int = 1000
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, 'samples_per_node', tuple(int(v) for v in self.samples_per_node))
        if self.n_nodes < 2:
            raise BadSpec('n_nodes', "at least two nodes are required")
        if self.input_dim < 2:
            raise BadSpec('input_dim', "must be at least 2")
        if len(self.samples_per_node) != 2:
            raise BadSpec('samples_per_node', "must be a [low, high] pair")
        low, high = self.samples_per_node
        if not 1 <= low <= high:
            raise BadSpec('samples_per_node', f"need 1 <= low <= high, got [{low}, {high}]")
        if self.noise_sd < 0:
            raise BadSpec('noise_sd', "must be non-negative")
        if self.context_shift < 0:
            raise BadSpec('context_shift', "must be non-negative")
        if self.test_samples < 2:
            raise BadSpec('test_samples', "must be at least 2")

    @property
    def strategy_dim(self):
        """Width of the strategy feature block; the rest is node context"""
        return self.input_dim // 2


@dataclass(frozen=True)
class GeneratorTruth:
    """Hidden parameters of the target function and the per-node shifts"""

    v: np.ndarray
    u: float
    pair: Tuple[int, int]
    context_means: np.ndarray


def _uniform_ball(rng, count, dim, radius):
    direction = rng.normal(size=(count, dim))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    scale = radius * rng.uniform(size=(count, 1)) ** (1.0 / dim)
    return direction * scale


def _targets(X, truth, noise_sd, rng):
    a, b = truth.pair
    z = X @ truth.v + truth.u * X[:, a] * X[:, b]
    y = 1.0 / (1.0 + np.exp(-z))
    if noise_sd > 0:
        y = y + rng.normal(0.0, noise_sd, size=y.size)
    return np.clip(y, 0.0, 1.0)


def _draw_features(rng, n, spec, shift):
    X = rng.normal(size=(n, spec.input_dim))
    X[:, spec.strategy_dim:] += shift
    return X


def generate_dataset(spec):
    """Per-node feature-skewed partitions, a pooled test set and the generator truth"""
    rng = np.random.default_rng(spec.seed)
    d, k = spec.input_dim, spec.strategy_dim
    truth = GeneratorTruth(
        v=rng.normal(0.0, 1.0 / np.sqrt(d), size=d),
        u=float(rng.normal(0.0, 0.5)),
        pair=(0, k),
        context_means=_uniform_ball(rng, spec.n_nodes, d - k, spec.context_shift),
    )
    low, high = spec.samples_per_node
    partitions = []
    for i in range(spec.n_nodes):
        n = int(rng.integers(low, high + 1))
        X = _draw_features(rng, n, spec, truth.context_means[i])
        partitions.append(LocalDataset(X, _targets(X, truth, spec.noise_sd, rng)))

    # Test rows come from the mixture of all node distributions
    owners = rng.integers(0, spec.n_nodes, size=spec.test_samples)
    X_test = _draw_features(rng, spec.test_samples, spec, truth.context_means[owners])
    test = LocalDataset(X_test, _targets(X_test, truth, spec.noise_sd, rng))
    logger.debug("generated %d partitions (%d rows) and %d test rows",
                 len(partitions), sum(p.size for p in partitions), test.size)
    return partitions, test, truth


def _pool_strategy(rng, index, base):
    """One pool strategy; index 0 reproduces the base strategy exactly"""
    if index == 0 and base is not None:
        return base
    n_actions = int(rng.integers(1, 4))
    kinds = rng.choice(len(ACTION_VOCABULARY), size=n_actions, replace=False)
    n_goals = int(rng.integers(1, 4))
    picks = rng.choice(len(CANONICAL_GOALS), size=n_goals, replace=False)
    goals = []
    for g in sorted(picks):
        metric, op, threshold = CANONICAL_GOALS[g]
        goals.append(Goal(metric, op, round(threshold * rng.uniform(0.7, 1.3), 4)))
    return StrategyTuple(
        user=f"pool_{index:02d}",
        goals=tuple(goals),
        entities=(f"device_{index:02d}",),
        actions=tuple(ActionItem(ACTION_VOCABULARY[a]) for a in sorted(kinds)),
        window=TimeWindow(0.0, 3600.0),
    )


def generate_population(spec, strategy_pool_size, seed, base_strategy=None):
    """Seeded node profiles with 1-5 pool strategies of history each.

    When `base_strategy` is given it becomes the first pool entry, so some
    nodes hold an exact match for the strategy under verification.
    """
    if strategy_pool_size < 1:
        raise BadSpec('strategy_pool_size', "must be at least 1")
    rng = np.random.default_rng(seed)
    pool = [_pool_strategy(rng, j, base_strategy) for j in range(strategy_pool_size)]
    population = []
    for i in range(spec.n_nodes):
        count = int(rng.integers(1, 6))
        picks = rng.choice(strategy_pool_size, size=min(count, strategy_pool_size), replace=False)
        population.append(NodeProfile(
            node_id=i + 1,
            cpu_util=float(rng.uniform()),
            bandwidth=float(rng.uniform()),
            history=tuple(pool[j] for j in sorted(picks)),
            latency_class=ROUND_ROBIN[i % len(ROUND_ROBIN)],
            dataset_ref=f"node_{i + 1:02d}",
        ))
    return population
