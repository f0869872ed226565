"""Regression models, local SGD, evaluation metrics and aggregation rules"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from ssaflsim.errors import (
    AllZeroWeights,
    ArchMismatch,
    BadWeights,
    ConfigError,
    DegenerateTargets,
    DimensionMismatch,
    InfeasibleFloor,
    NonFiniteLoss,
)

logger = logging.getLogger(__name__)

# Losses above this value are treated as divergence
DIVERGENCE_CEILING = 1e6
WEIGHT_SUM_TOLERANCE = 1e-9


@dataclass(frozen=True)
class ModelArch:
    """Architecture descriptor: 'linear' or a one-hidden-layer tanh 'mlp'"""

    kind: str = 'mlp'
    input_dim: int = 16
    hidden: int = 16

    def __post_init__(self):
        if self.kind not in ('linear', 'mlp'):
            raise ConfigError('kind', f"must be 'linear' or 'mlp', got {self.kind!r}")
        if self.input_dim < 1:
            raise ConfigError('input_dim', "must be positive")
        if self.kind == 'mlp' and self.hidden < 1:
            raise ConfigError('hidden', "must be positive")

    @classmethod
    def linear(cls, d):
        return cls('linear', d, 0)

    @classmethod
    def mlp(cls, d, h=16):
        return cls('mlp', d, h)

    @property
    def n_params(self):
        """Flat parameter count"""
        d, h = self.input_dim, self.hidden
        if self.kind == 'linear':
            return d + 1
        return (d + 1) * h + (h + 1)


class ModelState:
    """Immutable flat parameter vector plus its architecture"""

    __slots__ = ('arch', 'params')

    def __init__(self, arch, params):
        values = np.array(params, dtype=np.float64).reshape(-1)
        if values.size != arch.n_params:
            raise ArchMismatch(f"{arch.kind} expects {arch.n_params} parameters, got {values.size}")
        if not np.all(np.isfinite(values)):
            raise NonFiniteLoss("model parameters are not finite")
        values.setflags(write=False)
        object.__setattr__(self, 'arch', arch)
        object.__setattr__(self, 'params', values)

    def __setattr__(self, name, value):
        raise AttributeError("ModelState is immutable")

    def __eq__(self, other):
        if not isinstance(other, ModelState):
            return NotImplemented
        return self.arch == other.arch and np.array_equal(self.params, other.params)

    def __repr__(self):
        return f"ModelState({self.arch.kind}, d={self.arch.input_dim}, n={self.params.size})"


class EvalMetrics(NamedTuple):
    mae: float
    rmse: float
    r2: float


@dataclass(frozen=True)
class LocalDataset:
    """Local inputs (|D_i| x d) and effectiveness targets in [0, 1]"""

    inputs: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        X = np.array(self.inputs, dtype=np.float64)
        y = np.array(self.targets, dtype=np.float64).reshape(-1)
        if X.ndim == 1:
            X = X.reshape(-1, 1)
        if X.shape[0] < 1:
            raise ConfigError('dataset', "needs at least one sample")
        if X.shape[0] != y.size:
            raise ConfigError('dataset', f"{X.shape[0]} rows but {y.size} targets")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
            raise ConfigError('dataset', "values must be finite")
        if np.any(y < 0) or np.any(y > 1):
            raise ConfigError('dataset', "targets must lie in [0, 1]")
        X.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, 'inputs', X)
        object.__setattr__(self, 'targets', y)

    @property
    def size(self):
        return self.targets.size

    @property
    def input_dim(self):
        return self.inputs.shape[1]


def concat_datasets(datasets):
    """Pool several datasets into one"""
    return LocalDataset(np.vstack([d.inputs for d in datasets]),
                        np.concatenate([d.targets for d in datasets]))


@dataclass(frozen=True)
class TrainingConfig:
    """Local SGD settings; eta == 0 is accepted as a no-op step"""

    eta: float = 0.01
    local_epochs: int = 5
    batch: int = 32
    seed: int = 0

    def __post_init__(self):
        if not (self.eta >= 0 and math.isfinite(self.eta)):
            raise ConfigError('eta', f"must be a finite non-negative step, got {self.eta}")
        if self.local_epochs < 1:
            raise ConfigError('local_epochs', "must be a positive integer")
        if self.batch < 1:
            raise ConfigError('batch', "must be a positive integer")


@dataclass(frozen=True)
class UploadPolicy:
    eps_base: float = 0.01
    lambda_s: float = 1.0

    def __post_init__(self):
        if not self.eps_base > 0:
            raise ConfigError('eps_base', "must be positive")
        if self.lambda_s < 0:
            raise ConfigError('lambda_s', "must be non-negative")


@dataclass(frozen=True)
class AggregationConfig:
    """Micro-batch aggregation: floor weight, batch size, window length (s)"""

    w_min: float = 0.1
    micro_batch: int = 3
    window: float = 2.0

    def __post_init__(self):
        if not 0 <= self.w_min < 1:
            raise ConfigError('w_min', "must lie in [0, 1)")
        if self.micro_batch < 1:
            raise ConfigError('micro_batch', "must be a positive integer")
        if self.w_min * self.micro_batch > 1:
            raise ConfigError('w_min', "w_min * micro_batch must not exceed 1")
        if not self.window > 0:
            raise ConfigError('window', "must be positive")


# ---------------------------------------------------------------------------
# Models
# ---------------------------------------------------------------------------

def init_model(arch, seed):
    """Seeded uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialisation per layer"""
    rng = np.random.default_rng(seed)
    d, h = arch.input_dim, arch.hidden
    if arch.kind == 'linear':
        bound = 1.0 / math.sqrt(d)
        return ModelState(arch, rng.uniform(-bound, bound, d + 1))
    b1 = 1.0 / math.sqrt(d)
    b2 = 1.0 / math.sqrt(h)
    first = rng.uniform(-b1, b1, (d + 1) * h)
    second = rng.uniform(-b2, b2, h + 1)
    return ModelState(arch, np.concatenate([first, second]))


def _unpack_mlp(arch, params):
    d, h = arch.input_dim, arch.hidden
    W1 = params[:h * d].reshape(h, d)
    b1 = params[h * d:h * d + h]
    w2 = params[h * d + h:h * d + 2 * h]
    b2 = params[-1]
    return W1, b1, w2, b2


def _forward(arch, params, X):
    if arch.kind == 'linear':
        return X @ params[:-1] + params[-1], None
    W1, b1, w2, b2 = _unpack_mlp(arch, params)
    A = np.tanh(X @ W1.T + b1)
    return A @ w2 + b2, A


def _loss_grad(arch, params, X, y):
    """MSE and its analytic gradient in the flat parameter layout"""
    n = y.size
    y_hat, A = _forward(arch, params, X)
    residual = y_hat - y
    loss = float(np.mean(residual ** 2))
    r = 2.0 * residual / n
    if arch.kind == 'linear':
        return loss, np.concatenate([X.T @ r, [r.sum()]])
    _, _, w2, _ = _unpack_mlp(arch, params)
    dZ = np.outer(r, w2) * (1.0 - A ** 2)
    return loss, np.concatenate([
        (dZ.T @ X).reshape(-1),
        dZ.sum(axis=0),
        A.T @ r,
        [r.sum()],
    ])


def _check_rows(m, X):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X.reshape(1, -1)
    if X.shape[1] != m.arch.input_dim:
        raise DimensionMismatch(f"model expects {m.arch.input_dim} inputs, got {X.shape[1]}")
    return X


def predict(m, x):
    """Forward pass for one input row"""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if x.size != m.arch.input_dim:
        raise DimensionMismatch(f"model expects {m.arch.input_dim} inputs, got {x.size}")
    y_hat, _ = _forward(m.arch, m.params, x.reshape(1, -1))
    return float(y_hat[0])


def predict_batch(m, X):
    """Forward pass for a matrix of rows"""
    y_hat, _ = _forward(m.arch, m.params, _check_rows(m, X))
    return y_hat


def loss_and_gradient(m, X, y):
    """MSE on (X, y) and its gradient with respect to m.params"""
    X = _check_rows(m, X)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    return _loss_grad(m.arch, m.params, X, y)


def local_loss(m, d):
    """Mean squared error of m on one dataset"""
    residual = predict_batch(m, d.inputs) - d.targets
    return float(np.mean(residual ** 2))


def global_loss(m, datasets):
    """|D_i|-weighted mean of the local losses"""
    if not datasets:
        raise ValueError("need at least one dataset")
    total = sum(d.size for d in datasets)
    return float(sum(d.size / total * local_loss(m, d) for d in datasets))


def local_train(m, d, cfg):
    """E_i epochs of seeded mini-batch SGD on MSE; returns a new model"""
    rng = np.random.default_rng(cfg.seed)
    params = np.array(m.params, dtype=np.float64)
    X, y = d.inputs, d.targets
    if X.shape[1] != m.arch.input_dim:
        raise DimensionMismatch(f"model expects {m.arch.input_dim} inputs, got {X.shape[1]}")
    n = d.size
    batch = min(cfg.batch, n)
    for _ in range(cfg.local_epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch):
            idx = order[start:start + batch]
            loss, grad = _loss_grad(m.arch, params, X[idx], y[idx])
            if not math.isfinite(loss) or loss > DIVERGENCE_CEILING:
                raise NonFiniteLoss(f"local loss reached {loss!r}; step size eta={cfg.eta} is too large")
            params -= cfg.eta * grad
    if not np.all(np.isfinite(params)):
        raise NonFiniteLoss(f"parameters diverged; step size eta={cfg.eta} is too large")
    return ModelState(m.arch, params)


def evaluate(m, test):
    """MAE, RMSE and R2 of m on a held-out set"""
    if test.size < 2:
        raise DegenerateTargets("evaluation needs at least two samples")
    y = test.targets
    sst = float(np.sum((y - y.mean()) ** 2))
    if sst == 0:
        raise DegenerateTargets("targets have zero variance")
    residual = predict_batch(m, test.inputs) - y
    sse = float(np.sum(residual ** 2))
    return EvalMetrics(
        mae=float(np.mean(np.abs(residual))),
        rmse=math.sqrt(sse / y.size),
        r2=1.0 - sse / sst,
    )


def save_checkpoint(m, path):
    """Write {arch, params} JSON"""
    payload = {
        'arch': {'kind': m.arch.kind, 'input_dim': m.arch.input_dim, 'hidden': m.arch.hidden},
        'params': m.params.tolist(),
    }
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(payload, f)


def load_checkpoint(path):
    """Read a checkpoint written by save_checkpoint"""
    with open(path, 'r', encoding='utf-8') as f:
        payload = json.load(f)
    return ModelState(ModelArch(**payload['arch']), payload['params'])


# ---------------------------------------------------------------------------
# Thresholded upload and aggregation
# ---------------------------------------------------------------------------

def _same_arch(a, b):
    if a.arch != b.arch:
        raise ArchMismatch(f"cannot combine {a.arch} with {b.arch}")


def update_delta(theta_local, theta_global):
    """Local-minus-global delta and its L2 norm"""
    _same_arch(theta_local, theta_global)
    delta = theta_local.params - theta_global.params
    return delta, float(np.linalg.norm(delta))


def upload_threshold(p, sim):
    """Per-node upload threshold, shrinking as similarity grows"""
    return p.eps_base * (1.0 + p.lambda_s * (1.0 - sim))


def pre_weight(sim, norm):
    """Preliminary aggregation weight"""
    return sim * norm


def normalized_pre_weights(pre):
    """Pre-weights scaled to sum to one (uniform when they are all zero)"""
    pre = np.asarray(pre, dtype=np.float64)
    total = pre.sum()
    if total <= 0:
        return np.full(pre.size, 1.0 / pre.size)
    return pre / total


def protected_weights(pre, w_min, fallback_uniform=True):
    """Normalize, floor at w_min, renormalize"""
    pre = np.asarray(pre, dtype=np.float64).reshape(-1)
    n = pre.size
    if n == 0:
        raise BadWeights("no pre-weights to protect")
    if np.any(pre < 0) or not np.all(np.isfinite(pre)):
        raise BadWeights("pre-weights must be finite and non-negative")
    if w_min * n > 1 + WEIGHT_SUM_TOLERANCE:
        raise InfeasibleFloor(f"w_min={w_min} with {n} updates exceeds total mass 1")
    total = pre.sum()
    if total <= 0:
        if not fallback_uniform:
            raise AllZeroWeights(f"all {n} pre-weights are zero")
        logger.warning("all %d pre-weights are zero; using uniform weights", n)
        return np.full(n, 1.0 / n)
    normalized = pre / total
    if w_min == 0:
        return normalized
    floored = np.maximum(w_min, normalized)
    return floored / floored.sum()


def apply_update(theta_global, deltas, weights):
    """theta + sum_j w_j * delta_j"""
    weights = np.asarray(weights, dtype=np.float64).reshape(-1)
    if len(deltas) != weights.size or weights.size == 0:
        raise BadWeights(f"{len(deltas)} deltas but {weights.size} weights")
    if np.any(weights < 0) or abs(weights.sum() - 1.0) > WEIGHT_SUM_TOLERANCE:
        raise BadWeights(f"weights must be non-negative and sum to 1, got sum {weights.sum()!r}")
    step = np.zeros(theta_global.arch.n_params)
    for delta, w in zip(deltas, weights):
        delta = np.asarray(delta, dtype=np.float64)
        if delta.shape != step.shape:
            raise ArchMismatch(f"delta of length {delta.size}, model has {step.size} parameters")
        step += w * delta
    return ModelState(theta_global.arch, theta_global.params + step)


def fedavg_round(theta_global, locals_):
    """|D_i|-weighted parameter average of the client models"""
    if not locals_:
        raise BadWeights("fedavg needs at least one client model")
    for model, size in locals_:
        _same_arch(model, theta_global)
        if size <= 0:
            raise BadWeights("client dataset sizes must be positive")
    total = float(sum(size for _, size in locals_))
    params = np.zeros(theta_global.arch.n_params)
    for model, size in locals_:
        params += (size / total) * model.params
    return ModelState(theta_global.arch, params)


def fedasync_update(theta_global, theta_local, alpha, staleness, decay_a):
    """Staleness-decayed convex mix of global and local models"""
    _same_arch(theta_local, theta_global)
    alpha_t = alpha * float(staleness + 1) ** (-decay_a)
    return ModelState(theta_global.arch,
                      (1.0 - alpha_t) * theta_global.params + alpha_t * theta_local.params)


def semiasync_update(buffer, k, theta_global):
    """Average the first k buffered (model, size) pairs once the quorum is met.

    The consumed entries are removed from `buffer` in place; returns None
    while fewer than k models are buffered.
    """
    if k < 1:
        raise ConfigError('k', "quorum must be a positive integer")
    if len(buffer) < k:
        return None
    quorum = list(buffer[:k])
    merged = fedavg_round(theta_global, quorum)
    del buffer[:k]
    return merged
