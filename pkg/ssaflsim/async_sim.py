"""Deterministic discrete-event simulator for SSAFL and its baseline protocols"""

from __future__ import annotations

import heapq
import json
import logging
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Dict, List, Optional, Protocol, Tuple

import numpy as np

from ssaflsim.datagen import generate_dataset, generate_population
from ssaflsim.errors import ConfigError, NonFiniteLoss
from ssaflsim.fl_core import (
    DIVERGENCE_CEILING,
    ModelArch,
    apply_update,
    evaluate,
    fedasync_update,
    fedavg_round,
    global_loss,
    init_model,
    local_train,
    normalized_pre_weights,
    pre_weight,
    protected_weights,
    semiasync_update,
    update_delta,
    upload_threshold,
)
from ssaflsim.intent_core import parse_strategy
from ssaflsim.similarity_engine import LatencyClass, NodeScore, select_with_fallback

logger = logging.getLogger(__name__)


class Method(Enum):
    """Aggregation protocols the simulator can drive"""

    SSAFL = 'SSAFL'
    SSAFL_NO_ADAPTIVE = 'SSAFLNoAdaptive'
    FEDAVG = 'FedAvg'
    FEDASYN = 'FedAsyn'
    SEMIASYN = 'SemiAsyn'

    @classmethod
    def parse(cls, name):
        for method in cls:
            if method.value.lower() == str(name).lower():
                return method
        raise ConfigError('methods', f"unknown method {name!r}; choose from "
                                     f"{', '.join(m.value for m in cls)}")


@dataclass(frozen=True)
class LatencyModel:
    """Per-class training and upload times with seeded multiplicative jitter"""

    train_time_base: float = 1.0
    upload_time_base: float = 0.5
    class_factor: Dict[str, float] = field(
        default_factory=lambda: {'Fast': 1.0, 'Medium': 2.5, 'Slow': 5.0})
    jitter_pct: float = 0.1

    def __post_init__(self):
        if not self.train_time_base > 0:
            raise ConfigError('train_time_base', "must be positive")
        if not self.upload_time_base > 0:
            raise ConfigError('upload_time_base', "must be positive")
        if not 0 <= self.jitter_pct < 1:
            raise ConfigError('jitter_pct', "must lie in [0, 1)")
        for cls in LatencyClass:
            if cls.value not in self.class_factor:
                raise ConfigError('class_factor', f"missing factor for {cls.value}")
            if not self.class_factor[cls.value] > 0:
                raise ConfigError('class_factor', f"factor for {cls.value} must be positive")

    def _jitter(self, rng):
        return 1.0 + self.jitter_pct * rng.uniform(-1.0, 1.0)

    def train_time(self, latency_class, epochs, rng):
        """Simulated seconds for `epochs` local epochs"""
        return self.train_time_base * epochs * self.class_factor[latency_class.value] * self._jitter(rng)

    def upload_time(self, latency_class, rng):
        """Simulated seconds for one upload"""
        return self.upload_time_base * self.class_factor[latency_class.value] * self._jitter(rng)


@dataclass(frozen=True)
class StopRule:
    """Aggregation budget, loss floor, plateau patience and a sim-time cap"""

    t_max: int = 300
    loss_floor: float = 1e-4
    patience: int = 60
    rel_improve: float = 1e-3
    max_sim_time: float = 3600.0

    def __post_init__(self):
        if self.t_max < 1:
            raise ConfigError('t_max', "must be at least 1")
        if self.patience < 1:
            raise ConfigError('patience', "must be at least 1")
        if self.rel_improve < 0:
            raise ConfigError('rel_improve', "must be non-negative")
        if not self.max_sim_time > 0:
            raise ConfigError('max_sim_time', "must be positive")


@dataclass(frozen=True)
class BaselineConfig:
    """FedAsyn mixing and SemiAsyn quorum settings"""

    fedasync_alpha: float = 0.6
    fedasync_decay: float = 0.5
    semiasync_k: int = 3

    def __post_init__(self):
        if not 0 < self.fedasync_alpha <= 1:
            raise ConfigError('fedasync_alpha', "must lie in (0, 1]")
        if self.fedasync_decay < 0:
            raise ConfigError('fedasync_decay', "must be non-negative")
        if self.semiasync_k < 1:
            raise ConfigError('semiasync_k', "must be a positive integer")


# ---------------------------------------------------------------------------
# Events and traces
# ---------------------------------------------------------------------------

class EventKind(Enum):
    TRAIN_DONE = 'train_done'
    UPLOAD_ARRIVE = 'upload_arrive'
    WINDOW_CLOSE = 'window_close'


@dataclass
class SimEvent:
    time: float
    seq: int
    kind: EventKind
    node: Optional[int] = None
    payload: Any = None


class EventQueue:
    """Min-heap of events ordered by (time, insertion sequence)"""

    def __init__(self):
        self._heap = []
        self._seq = 0

    def push(self, time, kind, node=None, payload=None):
        if time < 0:
            raise ValueError("event time must be non-negative")
        event = SimEvent(time, self._seq, kind, node, payload)
        heapq.heappush(self._heap, (time, self._seq, event))
        self._seq += 1
        return event

    def pop(self):
        return heapq.heappop(self._heap)[2]

    def __len__(self):
        return len(self._heap)


@dataclass
class TraceEvent:
    """One row of the run trace.

    kind is 'train_done' (client-side gate decision), 'upload' (arrival at
    the server, counted in gamma) or 'aggregate' (server update).
    """

    event_id: int
    time: float
    node: Optional[int]
    kind: str
    delta_norm: Optional[float]
    eps: Optional[float]
    tau: Optional[int]
    accepted: bool
    gamma: Optional[int] = None

    def to_dict(self):
        return {
            'event_id': self.event_id,
            'time': self.time,
            'node': self.node,
            'kind': self.kind,
            'delta_norm': self.delta_norm,
            'eps': self.eps,
            'tau': self.tau,
            'accepted': self.accepted,
            'gamma': self.gamma,
        }


@dataclass
class EventTrace:
    """Append-only run record with upload counters and loss history"""

    events: List[TraceEvent] = field(default_factory=list)
    gamma: Dict[int, int] = field(default_factory=dict)
    rounds: Dict[int, int] = field(default_factory=dict)
    loss_history: List[Tuple[int, float]] = field(default_factory=list)

    def record(self, time, node, kind, delta_norm=None, eps=None, tau=None, accepted=True):
        gamma = self.gamma.get(node) if node is not None else None
        event = TraceEvent(len(self.events), time, node, kind, delta_norm, eps, tau, accepted, gamma)
        self.events.append(event)
        return event

    def count_upload(self, node):
        """Increment the node's upload counter"""
        self.gamma[node] = self.gamma.get(node, 0) + 1

    @property
    def aggregations(self):
        return len(self.loss_history)

    @property
    def total_uploads(self):
        return sum(self.gamma.values())

    def to_jsonl(self):
        return ''.join(json.dumps(e.to_dict()) + '\n' for e in self.events)


@dataclass(frozen=True)
class MetricsRow:
    event_id: int
    sim_time: float
    method: str
    mae: float
    rmse: float
    r2: float
    global_loss: float


METRICS_HEADER = 'event_id,sim_time,method,mae,rmse,r2,global_loss'


def metrics_to_csv(rows):
    """Render metrics rows as CSV text (repr floats for byte stability)"""
    lines = [METRICS_HEADER]
    for r in rows:
        lines.append(f"{r.event_id},{r.sim_time!r},{r.method},{r.mae!r},{r.rmse!r},{r.r2!r},{r.global_loss!r}")
    return '\n'.join(lines) + '\n'


@dataclass
class WindowRecord:
    """Weights and deltas of one aggregation window"""

    event_id: int
    nodes: List[int]
    pre_weights: np.ndarray
    weights: np.ndarray
    deltas: List[np.ndarray]


@dataclass
class RunResult:
    method: str
    seed: int
    final: Any
    trace: EventTrace
    metrics: List[MetricsRow]
    windows: List[WindowRecord]
    selection: List[NodeScore]
    thresholds: Dict[int, float]
    processed_events: int = 0


def stop_check(trace, rule):
    """True once the loss floor, the plateau patience or the event budget binds"""
    losses = [loss for _, loss in trace.loss_history]
    if len(losses) >= rule.t_max:
        return True
    if not losses:
        return False
    if losses[-1] <= rule.loss_floor:
        return True
    if len(losses) > rule.patience:
        best_before = min(losses[:-rule.patience])
        best_recent = min(losses[-rule.patience:])
        improvement = (best_before - best_recent) / max(abs(best_before), 1e-300)
        if improvement < rule.rel_improve:
            return True
    return False


# ---------------------------------------------------------------------------
# Workloads
# ---------------------------------------------------------------------------

class Workload(Protocol):
    """What the event loop needs from a learning task"""

    def initial_model(self): ...

    def sample_count(self, node_id): ...

    def train(self, node_id, model, round_seed): ...

    def global_loss(self, model): ...

    def evaluate(self, model): ...


class RegressionWorkload:
    """Per-node regression partitions plus the server-held test set"""

    def __init__(self, partitions, test, arch, training, seed):
        """Bind data, model architecture and local training settings"""
        self.partitions = partitions
        self.test = test
        self.arch = arch
        self.training = training
        self.seed = seed

    def initial_model(self):
        return init_model(self.arch, self.seed)

    def sample_count(self, node_id):
        return self.partitions[node_id - 1].size

    def train(self, node_id, model, round_seed):
        cfg = replace(self.training, seed=round_seed)
        return local_train(model, self.partitions[node_id - 1], cfg)

    def global_loss(self, model):
        return global_loss(model, self.partitions)

    def evaluate(self, model):
        return evaluate(model, self.test)


# ---------------------------------------------------------------------------
# Simulators
# ---------------------------------------------------------------------------

@dataclass
class ClientState:
    """Client-side training state of one node"""

    node_id: int
    latency_class: LatencyClass
    similarity: float = 1.0
    eps: float = 0.0
    base: Any = None
    base_version: int = 0
    local: Any = None


@dataclass
class Upload:
    delta: np.ndarray
    norm: float
    base_version: int
    model: Any


class AsyncSimulator:
    """Shared event loop; subclasses implement the server-side protocol"""

    method = None

    def __init__(self, workload: Workload, clients, latency, stop, seed, epochs):
        """Set up clients, queue and trace for one seeded run"""
        self.workload = workload
        self.clients = {c.node_id: c for c in clients}
        self.latency = latency
        self.stop = stop
        self.seed = seed
        self.epochs = epochs
        self.queue = EventQueue()
        self.trace = EventTrace()
        self.metrics = []
        self.windows = []
        self.global_model = workload.initial_model()
        self.version = 0
        self.now = 0.0
        self.stopped = False
        self.processed = 0
        self.jitter_rng = np.random.default_rng([seed, 0x5AF1])
        for node_id in self.clients:
            self.trace.gamma[node_id] = 0
            self.trace.rounds[node_id] = 0

    # -- client side -------------------------------------------------------

    def _round_seed(self, client):
        rounds = self.trace.rounds[client.node_id]
        return int(np.random.SeedSequence([self.seed, client.node_id, rounds]).generate_state(1)[0])

    def _start_training(self, client):
        duration = self.latency.train_time(client.latency_class, self.epochs, self.jitter_rng)
        self.queue.push(self.now + duration, EventKind.TRAIN_DONE, client.node_id)

    def _gate(self, client, norm):
        """Upload decision; baselines always upload"""
        return True

    def _on_train_done(self, event):
        client = self.clients[event.node]
        client.local = self.workload.train(client.node_id, client.local, self._round_seed(client))
        self.trace.rounds[client.node_id] += 1
        delta, norm = update_delta(client.local, client.base)
        passed = self._gate(client, norm)
        self.trace.record(self.now, client.node_id, 'train_done', norm, client.eps, accepted=passed)
        if passed:
            arrival = self.now + self.latency.upload_time(client.latency_class, self.jitter_rng)
            self.queue.push(arrival, EventKind.UPLOAD_ARRIVE, client.node_id,
                            Upload(delta, norm, client.base_version, client.local))
        else:
            # Keep accumulating against the same base model
            self._start_training(client)

    # -- server side -------------------------------------------------------

    def _on_upload_arrive(self, event):
        client = self.clients[event.node]
        upload = event.payload
        tau = self.version - upload.base_version
        self.trace.count_upload(client.node_id)
        self.trace.record(self.now, client.node_id, 'upload', upload.norm, client.eps, tau, True)
        self._receive(client, upload)

    def _receive(self, client, upload):
        raise NotImplementedError

    def _on_window_close(self, event):
        pass

    def _aggregated(self, new_model, participants):
        """Install a new global model, hand it to the participants, evaluate"""
        self.global_model = new_model
        self.version += 1
        event = self.trace.record(self.now, None, 'aggregate', tau=None, accepted=True)
        for client in participants:
            client.base = new_model
            client.local = new_model
            client.base_version = self.version
            self._start_training(client)
        self._evaluate(event.event_id)

    def _evaluate(self, event_id):
        loss = self.workload.global_loss(self.global_model)
        if not math.isfinite(loss) or loss > DIVERGENCE_CEILING:
            raise NonFiniteLoss(f"{self.method.value}: global loss reached {loss!r} at t={self.now:.3f}")
        self.trace.loss_history.append((event_id, loss))
        scores = self.workload.evaluate(self.global_model)
        if scores is not None:
            self.metrics.append(MetricsRow(event_id, self.now, self.method.value,
                                           scores.mae, scores.rmse, scores.r2, loss))
        logger.debug("%s v%d t=%.2f loss=%.6f", self.method.value, self.version, self.now, loss)
        if stop_check(self.trace, self.stop):
            self.stopped = True

    def run(self):
        """Drive the event loop until the stop rule or the time cap binds"""
        handlers = {
            EventKind.TRAIN_DONE: self._on_train_done,
            EventKind.UPLOAD_ARRIVE: self._on_upload_arrive,
            EventKind.WINDOW_CLOSE: self._on_window_close,
        }
        for node_id in sorted(self.clients):
            client = self.clients[node_id]
            client.base = client.local = self.global_model
            client.base_version = 0
            self._start_training(client)

        while self.queue and not self.stopped:
            event = self.queue.pop()
            if event.time > self.stop.max_sim_time:
                logger.warning("%s stopped at the simulated-time cap %.1fs after %d aggregations",
                               self.method.value, self.stop.max_sim_time, self.trace.aggregations)
                break
            self.now = event.time
            self.processed += 1
            handlers[event.kind](event)

        if not self.trace.loss_history:
            self._evaluate(-1)
        return self.trace


class SSAFLSimulator(AsyncSimulator):
    """Thresholded uploads with micro-batch, min-weight-protected aggregation"""

    method = Method.SSAFL

    def __init__(self, workload, clients, latency, stop, seed, epochs, aggregation, adaptive=True):
        """adaptive=False replaces the pre-weights with uniform weights"""
        super().__init__(workload, clients, latency, stop, seed, epochs)
        self.aggregation = aggregation
        self.adaptive = adaptive
        if not adaptive:
            self.method = Method.SSAFL_NO_ADAPTIVE
        self.buffer = []
        self.window_id = 0
        self.window_open = False

    def _gate(self, client, norm):
        return norm >= client.eps

    def _receive(self, client, upload):
        weight = pre_weight(client.similarity, upload.norm) if self.adaptive else 1.0
        self.buffer.append((client, upload, weight))
        if len(self.buffer) >= self.aggregation.micro_batch:
            self._flush()
        elif not self.window_open:
            self.window_open = True
            self.window_id += 1
            self.queue.push(self.now + self.aggregation.window, EventKind.WINDOW_CLOSE,
                            payload=self.window_id)

    def _on_window_close(self, event):
        if self.window_open and event.payload == self.window_id and self.buffer:
            self._flush()

    def _flush(self):
        clients = [c for c, _, _ in self.buffer]
        deltas = [u.delta for _, u, _ in self.buffer]
        pre = [w for _, _, w in self.buffer]
        weights = protected_weights(pre, self.aggregation.w_min)
        new_model = apply_update(self.global_model, deltas, weights)
        self.windows.append(WindowRecord(len(self.trace.events), [c.node_id for c in clients],
                                         normalized_pre_weights(pre), weights, deltas))
        self.buffer = []
        self.window_open = False
        self._aggregated(new_model, clients)


class FedAvgSimulator(AsyncSimulator):
    """Synchronous rounds: wait for every client, then |D_i|-weighted average"""

    method = Method.FEDAVG

    def __init__(self, workload, clients, latency, stop, seed, epochs):
        super().__init__(workload, clients, latency, stop, seed, epochs)
        self.arrived = []

    def _receive(self, client, upload):
        self.arrived.append((client, upload.model))
        if len(self.arrived) < len(self.clients):
            return
        models = [(model, self.workload.sample_count(c.node_id)) for c, model in self.arrived]
        participants = sorted((c for c, _ in self.arrived), key=lambda c: c.node_id)
        self.arrived = []
        self._aggregated(fedavg_round(self.global_model, models), participants)


class FedAsyncSimulator(AsyncSimulator):
    """Every arrival is mixed into the global model immediately"""

    method = Method.FEDASYN

    def __init__(self, workload, clients, latency, stop, seed, epochs, baselines):
        super().__init__(workload, clients, latency, stop, seed, epochs)
        self.baselines = baselines

    def _receive(self, client, upload):
        tau = self.version - upload.base_version
        new_model = fedasync_update(self.global_model, upload.model, self.baselines.fedasync_alpha,
                                    tau, self.baselines.fedasync_decay)
        self._aggregated(new_model, [client])


class SemiAsyncSimulator(AsyncSimulator):
    """Buffer arrivals and average once k of them are in"""

    method = Method.SEMIASYN

    def __init__(self, workload, clients, latency, stop, seed, epochs, baselines):
        super().__init__(workload, clients, latency, stop, seed, epochs)
        self.k = min(baselines.semiasync_k, len(self.clients))
        if self.k < baselines.semiasync_k:
            logger.warning("SemiAsyn quorum k=%d exceeds %d clients; using k=%d",
                           baselines.semiasync_k, len(self.clients), self.k)
        self.buffer = []
        self.waiting = []

    def _receive(self, client, upload):
        self.buffer.append((upload.model, self.workload.sample_count(client.node_id)))
        self.waiting.append(client)
        new_model = semiasync_update(self.buffer, self.k, self.global_model)
        if new_model is not None:
            participants = self.waiting[:self.k]
            del self.waiting[:self.k]
            self._aggregated(new_model, participants)


# ---------------------------------------------------------------------------
# Drivers
# ---------------------------------------------------------------------------

def prepare_run(config, seed):
    """Data, population and workload for one (config, seed) pair"""
    data_spec = replace(config.data, seed=seed)
    partitions, test, _ = generate_dataset(data_spec)
    strategy = parse_strategy(config.strategy)
    population = generate_population(
        data_spec, config.population.pool_size, seed,
        base_strategy=strategy if config.population.include_target else None)
    arch = ModelArch(config.model.kind, data_spec.input_dim, config.model.hidden)
    training = replace(config.training, seed=seed)
    workload = RegressionWorkload(partitions, test, arch, training, seed)
    return workload, population, strategy


def _result(sim, seed, selection):
    return RunResult(
        method=sim.method.value,
        seed=seed,
        final=sim.global_model,
        trace=sim.trace,
        metrics=sim.metrics,
        windows=sim.windows,
        selection=selection,
        thresholds={c.node_id: c.eps for c in sim.clients.values()},
        processed_events=sim.processed,
    )


def run_ssafl(config, seed=None, adaptive=True, prepared=None):
    """Select nodes, assign upload thresholds and simulate the SSAFL server"""
    seed = config.seeds[0] if seed is None else seed
    workload, population, strategy = prepared or prepare_run(config, seed)
    selection = select_with_fallback(strategy, population, config.selection, config.sim_weights)
    profiles = {p.node_id: p for p in population}
    clients = [
        ClientState(
            node_id=score.node_id,
            latency_class=profiles[score.node_id].latency_class,
            similarity=score.similarity,
            eps=upload_threshold(config.upload, score.similarity),
        )
        for score in selection
    ]
    logger.info("SSAFL seed=%d: %d clients, eps in [%.4f, %.4f]", seed, len(clients),
                min(c.eps for c in clients), max(c.eps for c in clients))
    sim = SSAFLSimulator(workload, clients, config.latency, config.stop, seed,
                         config.training.local_epochs, config.aggregation, adaptive=adaptive)
    sim.run()
    return _result(sim, seed, selection)


def run_baseline(method, config, seed=None, prepared=None):
    """FedAvg, FedAsyn or SemiAsyn with every node participating and no gate"""
    method = Method.parse(method) if not isinstance(method, Method) else method
    seed = config.seeds[0] if seed is None else seed
    workload, population, _ = prepared or prepare_run(config, seed)
    clients = [ClientState(p.node_id, p.latency_class) for p in sorted(population, key=lambda p: p.node_id)]
    args = (workload, clients, config.latency, config.stop, seed, config.training.local_epochs)
    if method is Method.FEDAVG:
        sim = FedAvgSimulator(*args)
    elif method is Method.FEDASYN:
        sim = FedAsyncSimulator(*args, config.baselines)
    elif method is Method.SEMIASYN:
        sim = SemiAsyncSimulator(*args, config.baselines)
    else:
        raise ConfigError('methods', f"{method.value} is not a baseline")
    logger.info("%s seed=%d: %d clients", method.value, seed, len(clients))
    sim.run()
    return _result(sim, seed, [])


def run_method(method, config, seed, prepared=None):
    """Dispatch one (method, seed) run"""
    method = Method.parse(method) if not isinstance(method, Method) else method
    if method is Method.SSAFL:
        return run_ssafl(config, seed, prepared=prepared)
    if method is Method.SSAFL_NO_ADAPTIVE:
        return run_ssafl(config, seed, adaptive=False, prepared=prepared)
    return run_baseline(method, config, seed, prepared=prepared)
