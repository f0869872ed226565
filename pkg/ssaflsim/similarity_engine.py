"""Strategy similarity, resource and suitability scoring, and node selection"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Tuple

from ssaflsim.errors import ConfigError, EmptySelection, ZeroThreshold
from ssaflsim.intent_core import StrategyTuple, strategy_from_dict, strategy_to_dict

logger = logging.getLogger(__name__)

WEIGHT_TOLERANCE = 1e-12


class LatencyClass(Enum):
    """Heterogeneity class of a node"""

    FAST = 'Fast'
    MEDIUM = 'Medium'
    SLOW = 'Slow'


def _unit_interval(name, value):
    if not 0.0 <= value <= 1.0:
        raise ConfigError(name, f"must lie in [0, 1], got {value}")


@dataclass(frozen=True)
class SimilarityWeights:
    """Action/condition weights and the condition decay scale"""

    gamma1: float = 0.6
    gamma2: float = 0.4
    a_g: float = 2.0

    def __post_init__(self):
        _unit_interval('gamma1', self.gamma1)
        _unit_interval('gamma2', self.gamma2)
        if abs(self.gamma1 + self.gamma2 - 1.0) > WEIGHT_TOLERANCE:
            raise ConfigError('gamma', f"gamma1 + gamma2 must equal 1, got {self.gamma1 + self.gamma2}")
        if not self.a_g > 0:
            raise ConfigError('a_g', f"must be positive, got {self.a_g}")


@dataclass(frozen=True)
class SelectionConfig:
    """Suitability weights and the selection threshold"""

    beta1: float = 0.7
    beta2: float = 0.3
    delta1: float = 0.5
    delta2: float = 0.5
    tau_s: float = 0.5
    fallback_top_k: int = 3

    def __post_init__(self):
        for name in ('beta1', 'beta2', 'delta1', 'delta2', 'tau_s'):
            _unit_interval(name, getattr(self, name))
        if abs(self.beta1 + self.beta2 - 1.0) > WEIGHT_TOLERANCE:
            raise ConfigError('beta', f"beta1 + beta2 must equal 1, got {self.beta1 + self.beta2}")
        if abs(self.delta1 + self.delta2 - 1.0) > WEIGHT_TOLERANCE:
            raise ConfigError('delta', f"delta1 + delta2 must equal 1, got {self.delta1 + self.delta2}")
        if self.fallback_top_k < 0:
            raise ConfigError('fallback_top_k', "must be non-negative")


@dataclass(frozen=True)
class NodeProfile:
    """Resources, latency class and strategy history of one node"""

    node_id: int
    cpu_util: float
    bandwidth: float
    history: Tuple[StrategyTuple, ...] = ()
    latency_class: LatencyClass = LatencyClass.FAST
    dataset_ref: str = ''

    def __post_init__(self):
        _unit_interval(f"node[{self.node_id}].cpu_util", self.cpu_util)
        _unit_interval(f"node[{self.node_id}].bandwidth", self.bandwidth)
        object.__setattr__(self, 'history', tuple(self.history))
        if not isinstance(self.latency_class, LatencyClass):
            object.__setattr__(self, 'latency_class', LatencyClass(self.latency_class))


@dataclass(frozen=True)
class NodeScore:
    """Selection outcome for one node"""

    node_id: int
    suitability: float
    similarity: float
    resource: float = field(default=0.0, compare=False)


def action_similarity(a, b):
    """Jaccard similarity of two action-kind sets (1 when both are empty)"""
    a, b = set(a), set(b)
    union = a | b
    if not union:
        return 1.0
    return len(a & b) / len(union)


def condition_similarity(g, g2, a_g):
    """Exponential-decay similarity of two goals on the same metric"""
    if g.metric != g2.metric:
        return 0.0
    if g.threshold == 0:
        raise ZeroThreshold(f"goal '{g.metric}' has a zero threshold")
    return math.exp(-a_g * abs(g.threshold - g2.threshold) / abs(g.threshold))


def goal_set_similarity(current, historical, a_g):
    """Mean over current goals of the best-matching historical goal"""
    if not current:
        raise ValueError("current goal list must be non-empty")
    total = 0.0
    for g in current:
        total += max((condition_similarity(g, h, a_g) for h in historical), default=0.0)
    return total / len(current)


def strategy_similarity(s, profile, w):
    """Best similarity between s and any strategy in the node history"""
    kinds = s.action_kinds
    best = 0.0
    for past in profile.history:
        sim = (w.gamma1 * action_similarity(kinds, past.action_kinds)
               + w.gamma2 * goal_set_similarity(s.goals, past.goals, w.a_g))
        best = max(best, sim)
    # Floating error can push a perfect match a hair above one
    return min(best, 1.0)


def resource_score(profile, c):
    """Idle-CPU and bandwidth availability"""
    return c.delta1 * (1.0 - profile.cpu_util) + c.delta2 * profile.bandwidth


def suitability(sim, res, c):
    """Convex combination of similarity and resource availability"""
    return min(c.beta1 * sim + c.beta2 * res, 1.0)


def score_nodes(s, population, c, w):
    """Score every node of the population, ordered by node_id"""
    scores = []
    for profile in sorted(population, key=lambda p: p.node_id):
        sim = strategy_similarity(s, profile, w)
        res = resource_score(profile, c)
        scores.append(NodeScore(profile.node_id, suitability(sim, res, c), sim, res))
    return scores


def select_nodes(s, population, c, w):
    """Nodes with suitability >= tau_s, sorted by node_id"""
    if not population:
        raise ValueError("population must be non-empty")
    scores = score_nodes(s, population, c, w)
    selected = [score for score in scores if score.suitability >= c.tau_s]
    if not selected:
        best = max(score.suitability for score in scores)
        raise EmptySelection(f"no node reaches tau_s={c.tau_s} (best H={best:.4f})")
    logger.info("selected %d/%d nodes at tau_s=%.3f", len(selected), len(scores), c.tau_s)
    return selected


def select_with_fallback(s, population, c, w):
    """select_nodes, falling back to the top-k suitability nodes when empty"""
    try:
        return select_nodes(s, population, c, w)
    except EmptySelection:
        if c.fallback_top_k == 0:
            raise
        scores = score_nodes(s, population, c, w)
        ranked = sorted(scores, key=lambda x: (-x.suitability, x.node_id))
        chosen = sorted(ranked[:c.fallback_top_k], key=lambda x: x.node_id)
        logger.warning("empty selection at tau_s=%.3f; falling back to top-%d nodes %s",
                       c.tau_s, c.fallback_top_k, [x.node_id for x in chosen])
        return chosen


def profile_to_dict(p):
    """JSON-ready encoding of a node profile"""
    return {
        'node_id': p.node_id,
        'cpu_util': p.cpu_util,
        'bandwidth': p.bandwidth,
        'latency_class': p.latency_class.value,
        'dataset_ref': p.dataset_ref,
        'history': [strategy_to_dict(s) for s in p.history],
    }


def profile_from_dict(data):
    """Decode one profile_to_dict record"""
    return NodeProfile(
        node_id=int(data['node_id']),
        cpu_util=float(data['cpu_util']),
        bandwidth=float(data['bandwidth']),
        history=tuple(strategy_from_dict(s) for s in data.get('history', [])),
        latency_class=LatencyClass(data.get('latency_class', 'Fast')),
        dataset_ref=data.get('dataset_ref', ''),
    )


def population_to_json(population):
    """Serialize a population as a JSON array"""
    return json.dumps([profile_to_dict(p) for p in population], indent=2)


def population_from_json(text):
    """Parse a JSON array of node profiles, checking id uniqueness"""
    population = [profile_from_dict(d) for d in json.loads(text)]
    ids = [p.node_id for p in population]
    if len(set(ids)) != len(ids):
        raise ConfigError('population', "node_id values must be unique")
    return population
