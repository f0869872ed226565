import json

import pytest
import yaml

from ssaflsim.cli import main
from ssaflsim.config import ExperimentConfig, config_from_dict

from conftest import OPERATOR_TEXT


@pytest.fixture(autouse=True)
def single_worker(monkeypatch):
    monkeypatch.setenv('SSAFL_SIM_THREADS', '1')


def run_cli(*argv):
    with pytest.raises(SystemExit) as info:
        main([str(a) for a in argv])
    return info.value.code


def artifacts(out):
    return sorted(p.name for p in out.iterdir() if not p.name.startswith('comparison'))


class TestRun:
    def test_single_run_writes_three_files(self, write_config, tmp_path):
        out = tmp_path / 'single'
        code = run_cli('run', '--config', write_config(), '--method', 'FedAvg', '--seed', 7, '--out', out)
        assert code == 0
        assert artifacts(out) == ['FedAvg_7.metrics.csv', 'FedAvg_7.summary.json', 'FedAvg_7.trace.jsonl']
        summary = json.loads((out / 'FedAvg_7.summary.json').read_text())
        assert summary['method'] == 'FedAvg'
        assert summary['seed'] == 7
        header = (out / 'FedAvg_7.metrics.csv').read_text().splitlines()[0]
        assert header == 'event_id,sim_time,method,mae,rmse,r2,global_loss'

    def test_every_method_seed_pair(self, write_config, tmp_path):
        out = tmp_path / 'grid'
        assert run_cli('run', '--config', write_config(seeds=(1, 2)), '--out', out) == 0
        assert len(artifacts(out)) == 12
        assert not list(out.glob('*.tmp'))

    def test_trace_lines_are_json(self, write_config, tmp_path):
        out = tmp_path / 'trace'
        run_cli('run', '--config', write_config(), '--method', 'SSAFL', '--out', out)
        events = [json.loads(line) for line in (out / 'SSAFL_7.trace.jsonl').read_text().splitlines()]
        assert {e['kind'] for e in events} <= {'train_done', 'upload', 'aggregate'}
        assert [e['event_id'] for e in events] == list(range(len(events)))

    def test_reruns_are_byte_identical(self, write_config, tmp_path):
        path = write_config()
        for name in ('a', 'b'):
            assert run_cli('run', '--config', path, '--method', 'SSAFL', '--out', tmp_path / name) == 0
        for suffix in ('metrics.csv', 'trace.jsonl', 'summary.json'):
            first = (tmp_path / 'a' / f"SSAFL_7.{suffix}").read_bytes()
            assert first == (tmp_path / 'b' / f"SSAFL_7.{suffix}").read_bytes()

    def test_worker_pool_matches_sequential(self, write_config, tmp_path, monkeypatch):
        path = write_config(seeds=(1, 2))
        assert run_cli('run', '--config', path, '--out', tmp_path / 'seq') == 0
        monkeypatch.setenv('SSAFL_SIM_THREADS', '2')
        assert run_cli('run', '--config', path, '--out', tmp_path / 'pool') == 0
        for name in artifacts(tmp_path / 'seq'):
            assert (tmp_path / 'seq' / name).read_bytes() == (tmp_path / 'pool' / name).read_bytes()

    def test_bad_beta_exits_with_config_status(self, write_config, tmp_path, capsys):
        path = write_config()
        data = yaml.safe_load(path.read_text())
        data['selection'].update(beta1=0.9, beta2=0.3)
        path.write_text(yaml.safe_dump(data))
        assert run_cli('run', '--config', path, '--out', tmp_path / 'never') == 2
        assert 'selection.beta' in capsys.readouterr().err
        assert not (tmp_path / 'never').exists()

    def test_divergence_exits_with_runtime_status(self, write_config, tmp_path, capsys):
        path = write_config()
        data = yaml.safe_load(path.read_text())
        data['training']['eta'] = 500.0
        path.write_text(yaml.safe_dump(data))
        out = tmp_path / 'diverged'
        assert run_cli('run', '--config', path, '--method', 'SSAFL', '--out', out) == 3
        assert '❌ Error' in capsys.readouterr().err
        assert not list(out.glob('SSAFL_7.*'))

    def test_unknown_method(self, write_config, tmp_path):
        assert run_cli('run', '--config', write_config(), '--method', 'FedProx', '--out', tmp_path / 'x') == 2

    def test_unwritable_output_exits_with_runtime_status(self, write_config, tmp_path, capsys):
        blocker = tmp_path / 'not_a_dir'
        blocker.write_text('')
        code = run_cli('run', '--config', write_config(), '--method', 'FedAvg', '--out', blocker / 'out')
        assert code == 3
        assert '❌ Error' in capsys.readouterr().err


class TestCompare:
    def test_compare_after_run(self, write_config, tmp_path):
        out = tmp_path / 'cmp'
        run_cli('run', '--config', write_config(), '--out', out)
        assert run_cli('compare', out / '*.summary.json', '--reference', 'FedAvg', '--out', out) == 0
        lines = (out / 'comparison.csv').read_text().splitlines()
        assert lines[0].startswith('# sd:')
        assert lines[1].endswith('upload_reduction_vs_FedAvg')
        assert [line.split(',')[0] for line in lines[2:]] == ['SSAFL', 'FedAvg']
        assert (out / 'comparison.xlsx').exists()

    def test_no_summaries(self, tmp_path):
        assert run_cli('compare', tmp_path / '*.summary.json', '--out', tmp_path) == 2


class TestVerify:
    def write_inputs(self, tmp_path, latency):
        strategy = tmp_path / 'strategy.txt'
        strategy.write_text(OPERATOR_TEXT)
        telemetry = tmp_path / 'telemetry.csv'
        telemetry.write_text('time,latency\n' + ''.join(f"{t},{latency}\n" for t in range(10)))
        return strategy, telemetry

    def test_stable_strategy(self, write_config, tmp_path, capsys):
        strategy, telemetry = self.write_inputs(tmp_path, 12)
        out = tmp_path / 'verify'
        code = run_cli('verify', '--config', write_config(), '--strategy', strategy,
                       '--telemetry', telemetry, '--out', out)
        assert code == 0
        assert 'Stable' in capsys.readouterr().out
        assert not out.exists() or not list(out.iterdir())

    def test_failing_strategy_is_reverified(self, write_config, tmp_path, capsys):
        strategy, telemetry = self.write_inputs(tmp_path, 20)
        out = tmp_path / 'verify'
        code = run_cli('verify', '--config', write_config(), '--strategy', strategy,
                       '--telemetry', telemetry, '--out', out)
        assert code == 0
        assert 'ReVerify' in capsys.readouterr().out
        assert artifacts(out) == ['SSAFL_7.metrics.csv', 'SSAFL_7.summary.json', 'SSAFL_7.trace.jsonl']

    def test_verdict_only(self, write_config, tmp_path):
        strategy, telemetry = self.write_inputs(tmp_path, 20)
        out = tmp_path / 'verify'
        code = run_cli('verify', '--config', write_config(), '--strategy', strategy,
                       '--telemetry', telemetry, '--out', out, '--no-reverify')
        assert code == 0
        assert not out.exists() or not list(out.iterdir())

    def test_p_min_range(self, write_config, tmp_path):
        strategy, telemetry = self.write_inputs(tmp_path, 12)
        code = run_cli('verify', '--config', write_config(), '--strategy', strategy,
                       '--telemetry', telemetry, '--p-min', 1.5)
        assert code == 2

    def test_malformed_telemetry_is_a_runtime_failure(self, write_config, tmp_path, capsys):
        strategy, telemetry = self.write_inputs(tmp_path, 12)
        telemetry.write_text('time,latency\n0,12\n1,n/a\n')
        code = run_cli('verify', '--config', write_config(), '--strategy', strategy,
                       '--telemetry', telemetry, '--out', tmp_path / 'verify')
        assert code == 3
        assert 'row 3' in capsys.readouterr().err


class TestGenerators:
    def test_gen_data(self, write_config, tmp_path):
        out = tmp_path / 'data'
        assert run_cli('gen-data', '--config', write_config(), '--out', out) == 0
        names = sorted(p.name for p in out.iterdir())
        assert names == ['node_01.csv', 'node_02.csv', 'node_03.csv', 'node_04.csv', 'test.csv', 'truth.json']
        rows = (out / 'node_01.csv').read_text().splitlines()
        assert rows[0] == 'x0,x1,x2,x3,y'
        assert 30 <= len(rows) - 1 <= 40

    def test_gen_population(self, write_config, tmp_path):
        out = tmp_path / 'pop'
        assert run_cli('gen-population', '--config', write_config(), '--out', out) == 0
        profiles = json.loads((out / 'population.json').read_text())
        assert len(profiles) == 4


def test_diagnose(write_config, tmp_path):
    out = tmp_path / 'diag'
    assert run_cli('diagnose', '--config', write_config(), '--out', out) == 0
    report = json.loads((out / 'diagnostics_7.json').read_text())
    assert report['seed'] == 7
    assert report['tau_max'] >= 0
    assert 0 < report['pl']['contraction'] < 1
    assert report['federated_gap'] is not None


def test_diagnose_without_optional_parts(write_config, tmp_path):
    out = tmp_path / 'diag'
    assert run_cli('diagnose', '--config', write_config(), '--out', out, '--no-pl', '--no-gap') == 0
    report = json.loads((out / 'diagnostics_7.json').read_text())
    assert report['pl'] is None
    assert report['federated_gap'] is None


def test_print_default_config(capsys):
    assert run_cli('print-default-config') == 0
    text = capsys.readouterr().out
    assert config_from_dict(yaml.safe_load(text)) == ExperimentConfig()


def test_no_command():
    assert run_cli() == 1
