"""Shared fixtures: a desk-sized experiment config that runs in well under a second"""

from dataclasses import replace

import pytest

from ssaflsim.async_sim import StopRule
from ssaflsim.config import ExperimentConfig, ModelConfig, PopulationConfig, dump_config
from ssaflsim.datagen import DataSpec
from ssaflsim.diagnostics import DiagnosticsConfig
from ssaflsim.fl_core import TrainingConfig
from ssaflsim.intent_core import parse_strategy

OPERATOR_TEXT = ("user=operator_02; goal latency < 15; entity ultrasonic_module; "
                 "action qos_adjustment(priority=5); window 0 600")


def make_tiny_config(output_dir, **changes):
    config = ExperimentConfig(
        data=DataSpec(n_nodes=4, samples_per_node=(30, 40), input_dim=4, test_samples=60, seed=0),
        population=PopulationConfig(pool_size=3),
        model=ModelConfig(kind='linear', hidden=0),
        training=TrainingConfig(eta=0.05, local_epochs=1, batch=16),
        stop=StopRule(t_max=12, patience=50, max_sim_time=500.0),
        diagnostics=DiagnosticsConfig(quad_dim=3, n_clients=2, samples_per_client=12, t_max=60,
                                      central_epochs=3),
        methods=('SSAFL', 'FedAvg'),
        seeds=(7,),
        output_dir=str(output_dir),
    )
    return replace(config, **changes) if changes else config


@pytest.fixture
def tiny_config(tmp_path):
    return make_tiny_config(tmp_path / 'out')


@pytest.fixture
def write_config(tmp_path):
    """Write a tiny config (with overrides) to YAML and return its path"""
    def _write(name='config.yaml', **changes):
        path = tmp_path / name
        path.write_text(dump_config(make_tiny_config(tmp_path / 'out', **changes)), encoding='utf-8')
        return path
    return _write


@pytest.fixture
def operator_strategy():
    return parse_strategy(OPERATOR_TEXT)
