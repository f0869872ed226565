"""Intent/strategy data model, strategy DSL parser and telemetry satisfaction checks"""

from __future__ import annotations

import csv
import json
import logging
import math
import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Tuple, Union

from lark import Lark, Transformer
from lark.exceptions import UnexpectedCharacters, UnexpectedEOF, UnexpectedInput, UnexpectedToken

from ssaflsim.errors import DSLSyntaxError, EmptyWindow, MissingMetric, SemanticError

logger = logging.getLogger(__name__)

METRIC_PATTERN = re.compile(r'[a-z][a-z0-9_]*\Z')
BARE_WORD_PATTERN = re.compile(r'[A-Za-z_][A-Za-z0-9_.\-]*\Z')

Scalar = Union[int, float, str]


class RelationalOp(Enum):
    """Relational operator of a goal condition"""

    LT = '<'
    GT = '>'
    LEQ = '<='
    GEQ = '>='

    @classmethod
    def from_symbol(cls, symbol):
        """Look up an operator by its string form"""
        for op in cls:
            if op.value == symbol:
                return op
        raise SemanticError(f"unknown relational operator {symbol!r}")

    def holds(self, measured, threshold):
        """Evaluate `measured <op> threshold`"""
        if self is RelationalOp.LT:
            return measured < threshold
        if self is RelationalOp.GT:
            return measured > threshold
        if self is RelationalOp.LEQ:
            return measured <= threshold
        return measured >= threshold


class Verdict(Enum):
    """Outcome of the reliability check on a deployed strategy"""

    STABLE = 'Stable'
    REVERIFY = 'ReVerify'


@dataclass(frozen=True)
class Goal:
    """One intent condition: metric, operator, threshold"""

    metric: str
    op: RelationalOp
    threshold: float

    def __post_init__(self):
        if not isinstance(self.metric, str) or not METRIC_PATTERN.match(self.metric):
            raise SemanticError(f"metric name {self.metric!r} must match [a-z][a-z0-9_]*")
        if not isinstance(self.op, RelationalOp):
            object.__setattr__(self, 'op', RelationalOp.from_symbol(self.op))
        threshold = float(self.threshold)
        if not math.isfinite(threshold):
            raise SemanticError(f"threshold of '{self.metric}' must be finite")
        object.__setattr__(self, 'threshold', threshold)


@dataclass(frozen=True)
class ActionItem:
    """A concrete operational step with ordered scalar parameters"""

    kind: str
    params: Tuple[Tuple[str, Scalar], ...] = ()

    def __post_init__(self):
        if not self.kind:
            raise SemanticError("action kind must be non-empty")
        params = tuple((str(k), v) for k, v in self.params)
        keys = [k for k, _ in params]
        if len(set(keys)) != len(keys):
            raise SemanticError(f"duplicate parameter key in action '{self.kind}'")
        for key, value in params:
            if isinstance(value, bool) or not isinstance(value, (int, float, str)):
                raise SemanticError(f"parameter '{key}' of action '{self.kind}' must be a scalar")
        object.__setattr__(self, 'params', params)


@dataclass(frozen=True)
class TimeWindow:
    """Validity period of a strategy, in seconds"""

    start: float
    end: float

    def __post_init__(self):
        start, end = float(self.start), float(self.end)
        if not (math.isfinite(start) and math.isfinite(end)):
            raise SemanticError("window bounds must be finite")
        if start < 0:
            raise SemanticError("window start must be non-negative")
        if start >= end:
            raise SemanticError(f"window start {start:g} must be before end {end:g}")
        object.__setattr__(self, 'start', start)
        object.__setattr__(self, 'end', end)

    def contains(self, t):
        """True if time t lies in [start, end]"""
        return self.start <= t <= self.end


@dataclass(frozen=True)
class StrategyTuple:
    """Strategy <U, G, E, A, T>.

    With refined=False the tuple is a pre-translation intent and may carry
    no goals yet; every other invariant still applies.
    """

    user: str
    goals: Tuple[Goal, ...]
    entities: Tuple[str, ...]
    actions: Tuple[ActionItem, ...]
    window: TimeWindow
    refined: bool = field(default=True, compare=False)

    def __post_init__(self):
        object.__setattr__(self, 'goals', tuple(self.goals))
        object.__setattr__(self, 'entities', tuple(self.entities))
        object.__setattr__(self, 'actions', tuple(self.actions))
        if not self.user:
            raise SemanticError("strategy needs a user")
        if self.refined and not self.goals:
            raise SemanticError("strategy needs at least one goal")
        if not self.entities:
            raise SemanticError("strategy needs at least one entity")
        if not self.actions:
            raise SemanticError("strategy needs at least one action")
        metrics = [g.metric for g in self.goals]
        seen = set()
        for metric in metrics:
            if metric in seen:
                raise SemanticError(f"duplicate goal metric '{metric}'")
            seen.add(metric)

    @property
    def action_kinds(self):
        """Set of action kinds (parameters ignored)"""
        return frozenset(a.kind for a in self.actions)


def refine(intent, goals):
    """Turn a pre-translation intent into an executable strategy"""
    return StrategyTuple(
        user=intent.user,
        goals=tuple(intent.goals) + tuple(goals),
        entities=intent.entities,
        actions=intent.actions,
        window=intent.window,
        refined=True,
    )


@dataclass(frozen=True)
class TelemetrySample:
    """Measured metric values at one instant"""

    time: float
    readings: Tuple[Tuple[str, float], ...]

    def __post_init__(self):
        if self.time < 0:
            raise SemanticError("telemetry time must be non-negative")
        readings = tuple((str(m), float(v)) for m, v in self.readings)
        names = [m for m, _ in readings]
        if len(set(names)) != len(names):
            raise SemanticError(f"duplicate metric in telemetry sample at t={self.time:g}")
        object.__setattr__(self, 'readings', readings)

    def reading(self, metric):
        """Measured value of one metric"""
        for name, value in self.readings:
            if name == metric:
                return value
        raise MissingMetric(metric)


# ---------------------------------------------------------------------------
# Strategy DSL
# ---------------------------------------------------------------------------

STRATEGY_GRAMMAR = r"""
start: _SEP? clause (_SEP clause)* _SEP?

?clause: user_clause
       | goal_clause
       | entity_clause
       | action_clause
       | window_clause

user_clause: "user" "=" NAME
goal_clause: "goal" NAME OP NUMBER
entity_clause: "entity" NAME
action_clause: "action" NAME "(" _params? ")"
_params: param ("," param)*
param: NAME "=" value
value: NUMBER | NAME | ESCAPED_STRING
window_clause: "window" NUMBER NUMBER

OP: "<=" | ">=" | "<" | ">"
NAME: /[A-Za-z_][A-Za-z0-9_.\-]*/
_SEP: /(?:[;\n]|#[^\n]*)(?:[;\n \t\r]|#[^\n]*)*/

%import common.SIGNED_NUMBER -> NUMBER
%import common.ESCAPED_STRING
%ignore /[ \t\r]+/
"""


def _number(token):
    text = str(token)
    if re.fullmatch(r'[+-]?\d+', text):
        return int(text)
    return float(text)


class _ClauseCollector(Transformer):
    """Flatten the parse tree into (clause, payload) pairs"""

    def start(self, items):
        return list(items)

    def user_clause(self, items):
        return ('user', str(items[0]))

    def goal_clause(self, items):
        metric, op, threshold = items
        return ('goal', (str(metric), str(op), float(threshold)))

    def entity_clause(self, items):
        return ('entity', str(items[0]))

    def action_clause(self, items):
        kind = str(items[0])
        return ('action', (kind, tuple(items[1:])))

    def param(self, items):
        return (str(items[0]), items[1])

    def value(self, items):
        token = items[0]
        if token.type == 'NUMBER':
            return _number(token)
        if token.type == 'ESCAPED_STRING':
            return json.loads(str(token))
        return str(token)

    def window_clause(self, items):
        return ('window', (float(items[0]), float(items[1])))


class StrategyParser:
    """Deterministic translation of strategy DSL text into StrategyTuple"""

    def __init__(self):
        """Build the LALR parser once"""
        self.parser = Lark(STRATEGY_GRAMMAR, parser='lalr', propagate_positions=True)

    def _describe(self, terminal_names):
        described = []
        for name in terminal_names:
            try:
                pattern = self.parser.get_terminal(name).pattern
                if pattern.type == 'str':
                    described.append(repr(pattern.value))
                    continue
            except KeyError:
                pass
            described.append(name)
        return described

    def _syntax_error(self, err, text):
        if isinstance(err, UnexpectedCharacters):
            return DSLSyntaxError(err.line, err.column, self._describe(err.allowed or ()),
                                  found=text[err.pos_in_stream] if err.pos_in_stream < len(text) else None)
        if isinstance(err, UnexpectedEOF):
            lines = text.split('\n')
            return DSLSyntaxError(len(lines), len(lines[-1]) + 1, self._describe(err.expected),
                                  found='end of input')
        if isinstance(err, UnexpectedToken):
            if err.token.type == '$END':
                lines = text.split('\n')
                return DSLSyntaxError(len(lines), len(lines[-1]) + 1, self._describe(err.expected),
                                      found='end of input')
            return DSLSyntaxError(err.line, err.column, self._describe(err.expected),
                                  found=str(err.token))
        return DSLSyntaxError(getattr(err, 'line', 0), getattr(err, 'column', 0), [])

    def parse(self, text, draft=False):
        """Parse DSL text; draft=True admits an intent without goals"""
        if isinstance(text, bytes):
            text = text.decode('utf-8')
        try:
            tree = self.parser.parse(text)
        except UnexpectedInput as err:
            raise self._syntax_error(err, text) from None
        clauses = _ClauseCollector().transform(tree)
        return self._assemble(clauses, draft)

    def _assemble(self, clauses, draft):
        users, goals, entities, actions, windows = [], [], [], [], []
        for kind, payload in clauses:
            if kind == 'user':
                users.append(payload)
            elif kind == 'goal':
                metric, op, threshold = payload
                goals.append(Goal(metric, RelationalOp.from_symbol(op), threshold))
            elif kind == 'entity':
                entities.append(payload)
            elif kind == 'action':
                actions.append(ActionItem(payload[0], payload[1]))
            elif kind == 'window':
                windows.append(payload)

        if len(users) != 1:
            raise SemanticError(f"expected exactly one user clause, found {len(users)}")
        if len(windows) != 1:
            raise SemanticError(f"expected exactly one window clause, found {len(windows)}")
        return StrategyTuple(
            user=users[0],
            goals=tuple(goals),
            entities=tuple(entities),
            actions=tuple(actions),
            window=TimeWindow(*windows[0]),
            refined=not draft,
        )


_default_parser = None


def parse_strategy(text, draft=False):
    """Parse strategy DSL text into a StrategyTuple"""
    global _default_parser
    if _default_parser is None:
        _default_parser = StrategyParser()
    return _default_parser.parse(text, draft=draft)


def _format_number(x):
    if isinstance(x, int):
        return str(x)
    if float(x).is_integer() and abs(x) < 1e15:
        return str(int(x))
    return repr(float(x))


def _format_value(value):
    if isinstance(value, str):
        if BARE_WORD_PATTERN.match(value):
            return value
        return json.dumps(value)
    return _format_number(value)


def format_strategy(s):
    """Print a strategy back to canonical DSL text"""
    clauses = [f"user={s.user}"]
    for g in s.goals:
        clauses.append(f"goal {g.metric} {g.op.value} {_format_number(g.threshold)}")
    for entity in s.entities:
        clauses.append(f"entity {entity}")
    for a in s.actions:
        params = ','.join(f"{k}={_format_value(v)}" for k, v in a.params)
        clauses.append(f"action {a.kind}({params})")
    clauses.append(f"window {_format_number(s.window.start)} {_format_number(s.window.end)}")
    return '; '.join(clauses)


def strategy_to_dict(s):
    """JSON-ready encoding of a strategy"""
    return {
        'user': s.user,
        'goals': [{'metric': g.metric, 'op': g.op.value, 'threshold': g.threshold} for g in s.goals],
        'entities': list(s.entities),
        'actions': [{'kind': a.kind, 'params': {k: v for k, v in a.params}} for a in s.actions],
        'window': {'start': s.window.start, 'end': s.window.end},
    }


def strategy_from_dict(data, draft=False):
    """Decode the JSON encoding produced by strategy_to_dict"""
    try:
        return StrategyTuple(
            user=data['user'],
            goals=tuple(Goal(g['metric'], RelationalOp.from_symbol(g['op']), g['threshold'])
                        for g in data.get('goals', [])),
            entities=tuple(data['entities']),
            actions=tuple(ActionItem(a['kind'], tuple(a.get('params', {}).items()))
                          for a in data['actions']),
            window=TimeWindow(data['window']['start'], data['window']['end']),
            refined=not draft,
        )
    except (KeyError, TypeError) as e:
        raise SemanticError(f"malformed strategy JSON: {e}") from None


def load_strategy(path):
    """Read a strategy from a .json file or a DSL text file"""
    with open(path, 'r', encoding='utf-8') as f:
        text = f.read()
    if str(path).endswith('.json'):
        return strategy_from_dict(json.loads(text))
    return parse_strategy(text)


def load_telemetry(path):
    """Read a telemetry CSV with header `time,<metric1>,<metric2>,...`"""
    samples = []
    with open(path, 'r', encoding='utf-8', newline='') as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if not header or header[0].strip() != 'time':
            raise SemanticError(f"{path}: telemetry header must start with 'time'")
        metrics = [h.strip() for h in header[1:]]
        for row in reader:
            if not row:
                continue
            try:
                samples.append(TelemetrySample(
                    time=float(row[0]),
                    readings=tuple((m, float(v)) for m, v in zip(metrics, row[1:]) if v.strip() != ''),
                ))
            except ValueError as e:
                raise SemanticError(f"{path}: row {reader.line_num}: {e}") from None
    return samples


# ---------------------------------------------------------------------------
# Satisfaction
# ---------------------------------------------------------------------------

def goal_satisfied(g, measured):
    """Satisfaction indicator of one goal"""
    return g.op.holds(measured, g.threshold)


def strategy_satisfied(s, sample):
    """True iff every goal of s holds on the sample"""
    # Look up every reading first so a missing metric is reported even when
    # an earlier goal already fails.
    values = [sample.reading(g.metric) for g in s.goals]
    return all(goal_satisfied(g, v) for g, v in zip(s.goals, values))


def empirical_satisfaction(s, samples):
    """Fraction of in-window samples on which the whole strategy holds"""
    in_window = [x for x in samples if s.window.contains(x.time)]
    if not in_window:
        raise EmptyWindow(f"no telemetry samples inside window "
                          f"[{s.window.start:g}, {s.window.end:g}]")
    satisfied = sum(1 for x in in_window if strategy_satisfied(s, x))
    return satisfied / len(in_window)


def reliability_verdict(p_s, p_min=0.9):
    """Stable unless the empirical satisfaction falls below p_min"""
    return Verdict.REVERIFY if p_s < p_min else Verdict.STABLE


def configuration_plan(s):
    """Intended configuration state per entity (identity controller mapping)"""
    plan = [(entity, s.actions) for entity in s.entities]
    for entity, actions in plan:
        logger.info("config plan: %s <- %s", entity, ', '.join(a.kind for a in actions))
    return plan
