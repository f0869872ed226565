"""Experiment configuration: YAML sections mapped onto typed sub-configs"""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Tuple

import yaml

from ssaflsim.async_sim import BaselineConfig, LatencyModel, Method, StopRule
from ssaflsim.datagen import DataSpec
from ssaflsim.diagnostics import DiagnosticsConfig
from ssaflsim.errors import ConfigError, IntentError
from ssaflsim.fl_core import AggregationConfig, TrainingConfig, UploadPolicy
from ssaflsim.intent_core import parse_strategy
from ssaflsim.similarity_engine import SelectionConfig, SimilarityWeights

THREADS_ENV = 'SSAFL_SIM_THREADS'

DEFAULT_STRATEGY = """\
user=operator_02
goal latency < 15
goal throughput >= 100
goal packet_loss < 0.01
entity edge_switch_01
entity edge_switch_02
action qos_adjustment(priority=high)
action bandwidth_allocation(share=0.4)
window 0 3600
"""


@dataclass(frozen=True)
class PopulationConfig:
    """Strategy pool size; include_target seeds the pool with the run strategy"""

    pool_size: int = 6
    include_target: bool = True

    def __post_init__(self):
        if self.pool_size < 1:
            raise ConfigError('pool_size', "must be at least 1")


@dataclass(frozen=True)
class ModelConfig:
    kind: str = 'mlp'
    hidden: int = 16

    def __post_init__(self):
        if self.kind not in ('linear', 'mlp'):
            raise ConfigError('kind', f"must be 'linear' or 'mlp', got {self.kind!r}")
        if self.kind == 'mlp' and self.hidden < 1:
            raise ConfigError('hidden', "must be positive for an mlp")


SECTIONS = {
    'data': DataSpec,
    'population': PopulationConfig,
    'selection': SelectionConfig,
    'sim_weights': SimilarityWeights,
    'model': ModelConfig,
    'training': TrainingConfig,
    'upload': UploadPolicy,
    'aggregation': AggregationConfig,
    'baselines': BaselineConfig,
    'latency': LatencyModel,
    'stop': StopRule,
    'diagnostics': DiagnosticsConfig,
}

SCALARS = ('strategy', 'methods', 'seeds', 'output_dir')


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything one experiment needs; every section validates itself"""

    data: DataSpec = field(default_factory=DataSpec)
    population: PopulationConfig = field(default_factory=PopulationConfig)
    strategy: str = DEFAULT_STRATEGY
    selection: SelectionConfig = field(default_factory=SelectionConfig)
    sim_weights: SimilarityWeights = field(default_factory=SimilarityWeights)
    model: ModelConfig = field(default_factory=ModelConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    upload: UploadPolicy = field(default_factory=UploadPolicy)
    aggregation: AggregationConfig = field(default_factory=AggregationConfig)
    baselines: BaselineConfig = field(default_factory=BaselineConfig)
    latency: LatencyModel = field(default_factory=LatencyModel)
    stop: StopRule = field(default_factory=StopRule)
    diagnostics: DiagnosticsConfig = field(default_factory=DiagnosticsConfig)
    methods: Tuple[str, ...] = tuple(m.value for m in Method)
    seeds: Tuple[int, ...] = (0, 1, 2, 3, 4)
    output_dir: str = 'results'

    def __post_init__(self):
        methods = tuple(Method.parse(m).value for m in self.methods)
        if not methods:
            raise ConfigError('methods', "at least one method is required")
        if len(set(methods)) != len(methods):
            raise ConfigError('methods', "methods must be distinct")
        object.__setattr__(self, 'methods', methods)

        seeds = tuple(self.seeds)
        if not seeds:
            raise ConfigError('seeds', "at least one seed is required")
        for seed in seeds:
            if isinstance(seed, bool) or not isinstance(seed, int) or not 0 <= seed < 2 ** 64:
                raise ConfigError('seeds', f"seeds must be 64-bit non-negative integers, got {seed!r}")
        if len(set(seeds)) != len(seeds):
            raise ConfigError('seeds', "seeds must be distinct")
        object.__setattr__(self, 'seeds', seeds)

        if not self.output_dir:
            raise ConfigError('output_dir', "must be a non-empty path")
        try:
            parse_strategy(self.strategy)
        except IntentError as e:
            raise ConfigError('strategy', str(e)) from None


def _build_section(name, cls, values):
    if values is None:
        values = {}
    if not isinstance(values, dict):
        raise ConfigError(name, "must be a mapping")
    known = {f.name for f in fields(cls)}
    for key in values:
        if key not in known:
            raise ConfigError(f"{name}.{key}", "unknown key")
    try:
        return cls(**values)
    except ConfigError as e:
        raise e.within(name) from None
    except (TypeError, ValueError) as e:
        raise ConfigError(name, str(e)) from None


def config_from_dict(data):
    """Build and validate an ExperimentConfig from parsed YAML"""
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError('config', "top level must be a mapping")
    for key in data:
        if key not in SECTIONS and key not in SCALARS:
            raise ConfigError(key, "unknown section")
    kwargs = {name: _build_section(name, cls, data.get(name)) for name, cls in SECTIONS.items()}
    for key in SCALARS:
        if key in data:
            kwargs[key] = data[key]
    try:
        return ExperimentConfig(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError('config', str(e)) from None


def _plain(value):
    if isinstance(value, tuple):
        return [_plain(v) for v in value]
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    return value


def config_to_dict(config):
    """Plain-data form of a config (tuples become lists)"""
    data = {}
    for f in fields(config):
        value = getattr(config, f.name)
        data[f.name] = _plain(asdict(value) if f.name in SECTIONS else value)
    return data


class _BlockDumper(yaml.SafeDumper):
    pass


def _str_presenter(dumper, value):
    style = '|' if '\n' in value else None
    return dumper.represent_scalar('tag:yaml.org,2002:str', value, style=style)


_BlockDumper.add_representer(str, _str_presenter)


def dump_config(config):
    """Render a config as YAML"""
    return yaml.dump(config_to_dict(config), Dumper=_BlockDumper, sort_keys=False)


def load_config(path):
    """Read and validate a YAML config file"""
    try:
        with open(path, 'r', encoding='utf-8') as f:
            data = yaml.safe_load(f)
    except OSError as e:
        raise ConfigError('config', f"cannot read {path}: {e}") from None
    except yaml.YAMLError as e:
        raise ConfigError('config', f"{path} is not valid YAML: {e}") from None
    return config_from_dict(data)


def apply_overrides(config, seed=None, method=None, output_dir=None):
    """CLI --seed / --method / --out overrides"""
    changes = {}
    if seed is not None:
        changes['seeds'] = (seed,)
    if method is not None:
        changes['methods'] = (method,)
    if output_dir is not None:
        changes['output_dir'] = str(output_dir)
    return replace(config, **changes) if changes else config


def worker_count(environ=None):
    """Worker-pool size from SSAFL_SIM_THREADS (default 1)"""
    raw = (os.environ if environ is None else environ).get(THREADS_ENV, '1')
    try:
        count = int(raw)
    except ValueError:
        raise ConfigError(THREADS_ENV, f"must be a positive integer, got {raw!r}") from None
    if count < 1:
        raise ConfigError(THREADS_ENV, f"must be a positive integer, got {raw!r}")
    return count
