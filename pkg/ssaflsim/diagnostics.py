"""Run diagnostics: staleness, trigger bias, PL contraction and the federated gap"""

from __future__ import annotations

import logging
import math
from collections import Counter
from dataclasses import dataclass, replace
from typing import Dict, Optional

import numpy as np

from ssaflsim.async_sim import ClientState, LatencyModel, SSAFLSimulator, StopRule, prepare_run, run_ssafl
from ssaflsim.datagen import ROUND_ROBIN
from ssaflsim.errors import ConfigError, Diverged, NonFiniteLoss, NoWindows
from ssaflsim.fl_core import (
    DIVERGENCE_CEILING,
    AggregationConfig,
    ModelArch,
    ModelState,
    concat_datasets,
    evaluate,
    global_loss,
    local_train,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class DiagnosticsConfig:
    """Quadratic PL task and centralized-reference settings.

    eta=None uses 1/(2L).
    """

    quad_dim: int = 8
    mu: float = 0.5
    L: float = 2.0
    n_clients: int = 3
    samples_per_client: int = 64
    noise_sd: float = 0.0
    eta: Optional[float] = None
    local_epochs: int = 5
    batch: int = 64
    eps_base: float = 1e-9
    t_max: int = 200
    patience: int = 40
    rel_improve: float = 1e-6
    loss_floor: float = 1e-14
    max_sim_time: float = 2000.0
    central_epochs: int = 50

    def __post_init__(self):
        if self.quad_dim < 2:
            raise ConfigError('quad_dim', "must be at least 2")
        if not 0 < self.mu <= self.L:
            raise ConfigError('mu', f"need 0 < mu <= L, got mu={self.mu}, L={self.L}")
        if self.n_clients < 1:
            raise ConfigError('n_clients', "must be positive")
        if self.samples_per_client < self.quad_dim:
            raise ConfigError('samples_per_client', "must be at least quad_dim")
        if self.noise_sd < 0:
            raise ConfigError('noise_sd', "must be non-negative")
        if self.eta is not None and not self.eta > 0:
            raise ConfigError('eta', "must be positive (or null for 1/(2L))")
        if self.local_epochs < 1 or self.batch < 1 or self.central_epochs < 1:
            raise ConfigError('local_epochs', "epoch and batch counts must be positive")
        if not self.eps_base > 0:
            raise ConfigError('eps_base', "must be positive")


@dataclass(frozen=True)
class StalenessReport:
    tau_max: int
    histogram: Dict[int, int]
    mean: float


@dataclass(frozen=True)
class PLReport:
    """Outcome of the quadratic PL run"""

    mu_hat: float
    L_hat: float
    eta: float
    local_epochs: int
    contraction: float
    contraction_bound: float
    plateau: float
    initial_gap: float
    f_star: float
    events: int
    monotone: bool


@dataclass(frozen=True)
class FederatedGap:
    param_distance: float
    federated_loss: float
    centralized_loss: float
    loss_gap: float
    federated_r2: float
    centralized_r2: float


def measure_staleness(trace):
    """Max and histogram of tau over uploads that reached the server"""
    if not trace.events:
        raise ValueError("trace is empty")
    taus = [e.tau for e in trace.events if e.kind == 'upload']
    histogram = dict(sorted(Counter(taus).items()))
    return StalenessReport(
        tau_max=max(taus, default=0),
        histogram=histogram,
        mean=float(np.mean(taus)) if taus else 0.0,
    )


def estimate_trigger_bias(trace, windows):
    """Worst relative gap between pre-weighted and protected aggregates"""
    if not windows:
        raise NoWindows("no aggregation windows were recorded")
    zeta = 0.0
    skipped = 0
    for window in windows:
        deltas = np.vstack(window.deltas)
        pre = np.asarray(window.pre_weights) @ deltas
        applied = np.asarray(window.weights) @ deltas
        denom = float(np.linalg.norm(pre))
        if denom == 0:
            skipped += 1
            continue
        zeta = max(zeta, float(np.linalg.norm(pre - applied)) / denom)
    logger.debug("trigger bias over %d windows (%d skipped, %d trace events): %.6g",
                 len(windows), skipped, len(trace.events), zeta)
    return zeta


def summarize(result):
    """Summary record of one run, as written to {method}_{seed}.summary.json"""
    last = result.metrics[-1] if result.metrics else None
    return {
        'method': result.method,
        'seed': result.seed,
        'final_mae': last.mae if last else None,
        'final_rmse': last.rmse if last else None,
        'final_r2': last.r2 if last else None,
        'total_uploads': result.trace.total_uploads,
        'per_node_gamma': {str(node): count for node, count in sorted(result.trace.gamma.items())},
        'tau_max': measure_staleness(result.trace).tau_max,
        'zeta_hat': estimate_trigger_bias(result.trace, result.windows) if result.windows else None,
        'wall_events': result.processed_events,
    }


# ---------------------------------------------------------------------------
# Quadratic PL task
# ---------------------------------------------------------------------------

class QuadraticWorkload:
    """Least-squares clients whose local Hessians all equal one SPD matrix A.

    Each client holds X_i = sqrt(n) U_i diag(sqrt(lambda)) Q^T with
    orthonormal U_i, so X_i^T X_i / n = A with spectrum lambda in [mu, L].
    The objective is half the mean squared residual; targets are pure noise
    so the noiseless optimum is theta = 0 with F* = 0.
    """

    def __init__(self, quad_dim, mu, L, n_clients, samples_per_client, noise_sd,
                 eta, local_epochs, batch, seed):
        rng = np.random.default_rng(seed)
        q, n = quad_dim, samples_per_client
        self.spectrum = np.linspace(mu, L, q)
        basis, _ = np.linalg.qr(rng.normal(size=(q, q)))
        scale = np.sqrt(self.spectrum)
        self.parts = []
        for _ in range(n_clients):
            U, _ = np.linalg.qr(rng.normal(size=(n, q)))
            X = math.sqrt(n) * (U * scale) @ basis.T
            y = noise_sd * rng.normal(size=n)
            self.parts.append((X, y))
        self.arch = ModelArch.linear(q - 1)
        theta0 = rng.normal(size=q)
        self.theta0 = theta0 / np.linalg.norm(theta0)
        self.eta = eta
        self.local_epochs = local_epochs
        self.batch = batch

        X_all = np.vstack([X for X, _ in self.parts])
        y_all = np.concatenate([y for _, y in self.parts])
        theta_star, *_ = np.linalg.lstsq(X_all, y_all, rcond=None)
        self.f_star = self._loss(theta_star, X_all, y_all)
        eig = np.linalg.eigvalsh(X_all.T @ X_all / y_all.size)
        self.mu_hat, self.L_hat = float(eig[0]), float(eig[-1])

    @staticmethod
    def _loss(theta, X, y):
        residual = X @ theta - y
        return 0.5 * float(np.mean(residual ** 2))

    def initial_model(self):
        return ModelState(self.arch, self.theta0)

    def sample_count(self, node_id):
        return self.parts[node_id - 1][1].size

    def train(self, node_id, model, round_seed):
        X, y = self.parts[node_id - 1]
        rng = np.random.default_rng(round_seed)
        theta = np.array(model.params)
        n = y.size
        batch = min(self.batch, n)
        for _ in range(self.local_epochs):
            order = rng.permutation(n)
            for start in range(0, n, batch):
                idx = order[start:start + batch]
                residual = X[idx] @ theta - y[idx]
                theta -= self.eta * (X[idx].T @ residual) / idx.size
        if not np.all(np.isfinite(theta)) or self._loss(theta, X, y) > DIVERGENCE_CEILING:
            raise NonFiniteLoss(f"quadratic client {node_id} diverged at eta={self.eta}")
        return ModelState(self.arch, theta)

    def global_loss(self, model):
        total = sum(y.size for _, y in self.parts)
        return float(sum(y.size / total * self._loss(model.params, X, y) for X, y in self.parts))

    def evaluate(self, model):
        return None


def _fit_contraction(gaps):
    """Per-event factor from a log-linear fit over the initial descent"""
    clipped = np.maximum(gaps, 0.0)
    tail = max(3, clipped.size // 10)
    plateau = float(np.median(clipped[-tail:]))
    cut = max(10.0 * plateau, clipped[0] * 1e-10, 1e-300)
    below = np.nonzero(clipped <= cut)[0]
    n_descent = int(below[0]) if below.size else clipped.size
    n_descent = min(max(n_descent, 2), clipped.size)
    logs = np.log(np.maximum(clipped[:n_descent], 1e-300))
    slope = np.polyfit(np.arange(n_descent, dtype=np.float64), logs, 1)[0]
    return float(math.exp(slope)), plateau


def pl_diagnostic(quad_dim, mu, L, config=None, latency=None, seed=0):
    """Run SSAFL on a quadratic PL objective and report its contraction and plateau"""
    config = replace(config or DiagnosticsConfig(), quad_dim=quad_dim, mu=mu, L=L)
    eta = config.eta if config.eta is not None else 1.0 / (2.0 * L)
    workload = QuadraticWorkload(quad_dim, mu, L, config.n_clients, config.samples_per_client,
                                 config.noise_sd, eta, config.local_epochs, config.batch, seed)
    clients = [ClientState(i + 1, ROUND_ROBIN[i % len(ROUND_ROBIN)], similarity=1.0, eps=config.eps_base)
               for i in range(config.n_clients)]
    stop = StopRule(t_max=config.t_max, loss_floor=workload.f_star + config.loss_floor,
                    patience=config.patience, rel_improve=config.rel_improve,
                    max_sim_time=config.max_sim_time)
    sim = SSAFLSimulator(workload, clients, latency or LatencyModel(), stop, seed,
                         config.local_epochs, AggregationConfig(w_min=0.1, micro_batch=1))
    sim.run()

    initial_gap = workload.global_loss(workload.initial_model()) - workload.f_star
    gaps = np.array([initial_gap] + [loss - workload.f_star for _, loss in sim.trace.loss_history])
    if gaps.size < 2:
        raise Diverged("no aggregation took place on the quadratic task")
    contraction, plateau = _fit_contraction(gaps)
    report = PLReport(
        mu_hat=workload.mu_hat,
        L_hat=workload.L_hat,
        eta=eta,
        local_epochs=config.local_epochs,
        contraction=contraction,
        contraction_bound=1.0 - mu * eta * config.local_epochs,
        plateau=plateau,
        initial_gap=float(initial_gap),
        f_star=workload.f_star,
        events=gaps.size - 1,
        monotone=bool(np.all(np.diff(gaps) <= 1e-12 * initial_gap)),
    )
    logger.info("PL task: contraction %.4f, plateau %.3e over %d events",
                report.contraction, report.plateau, report.events)
    if not 0 < contraction < 1:
        raise Diverged(f"fitted contraction factor {contraction:.4f} is not in (0, 1)")
    if not plateau <= initial_gap:
        raise Diverged(f"plateau {plateau:.4g} exceeds the starting gap {initial_gap:.4g}")
    return report


def federated_gap(config, seed=None, result=None):
    """Compare an SSAFL run with centralized training on the pooled partitions"""
    seed = (result.seed if result is not None else config.seeds[0]) if seed is None else seed
    prepared = prepare_run(config, seed)
    workload = prepared[0]
    if result is None:
        result = run_ssafl(config, seed, prepared=prepared)
    pooled = concat_datasets(workload.partitions)
    training = replace(config.training, local_epochs=config.diagnostics.central_epochs, seed=seed)
    central = local_train(workload.initial_model(), pooled, training)
    fed_loss = global_loss(result.final, workload.partitions)
    central_loss = global_loss(central, workload.partitions)
    return FederatedGap(
        param_distance=float(np.linalg.norm(result.final.params - central.params)),
        federated_loss=fed_loss,
        centralized_loss=central_loss,
        loss_gap=fed_loss - central_loss,
        federated_r2=evaluate(result.final, workload.test).r2,
        centralized_r2=evaluate(central, workload.test).r2,
    )
