from collections import Counter

import numpy as np
import pytest

from ssaflsim.async_sim import (
    AsyncSimulator,
    BaselineConfig,
    ClientState,
    EventKind,
    EventQueue,
    EventTrace,
    LatencyModel,
    Method,
    SSAFLSimulator,
    StopRule,
    metrics_to_csv,
    prepare_run,
    run_baseline,
    run_method,
    run_ssafl,
    stop_check,
)
from ssaflsim.errors import ConfigError, NonFiniteLoss
from ssaflsim.fl_core import AggregationConfig, TrainingConfig
from ssaflsim.similarity_engine import LatencyClass

from conftest import make_tiny_config

NO_JITTER = LatencyModel(jitter_pct=0.0)


def trace_with(losses):
    trace = EventTrace()
    trace.loss_history = list(enumerate(losses))
    return trace


def kinds(trace, kind):
    return [e for e in trace.events if e.kind == kind]


class TestStopCheck:
    def test_budget(self):
        assert stop_check(trace_with([0.5, 0.4, 0.3]), StopRule(t_max=3))

    def test_empty_history(self):
        assert not stop_check(trace_with([]), StopRule())

    def test_loss_floor(self):
        assert stop_check(trace_with([1e-5]), StopRule(loss_floor=1e-4))

    def test_plateau(self):
        rule = StopRule(patience=2, rel_improve=1e-3)
        assert stop_check(trace_with([1.0, 0.5, 0.5, 0.5]), rule)

    def test_still_improving(self):
        rule = StopRule(patience=2, rel_improve=1e-3)
        assert not stop_check(trace_with([1.0, 0.9, 0.5, 0.4]), rule)

    @pytest.mark.parametrize('field,value', [('t_max', 0), ('patience', 0), ('max_sim_time', 0.0)])
    def test_validation(self, field, value):
        with pytest.raises(ConfigError):
            StopRule(**{field: value})


class TestEventMachinery:
    def test_queue_orders_ties_by_insertion(self):
        q = EventQueue()
        q.push(1.0, EventKind.TRAIN_DONE, 1)
        q.push(0.5, EventKind.TRAIN_DONE, 2)
        q.push(1.0, EventKind.UPLOAD_ARRIVE, 3)
        assert [q.pop().node for _ in range(3)] == [2, 1, 3]
        assert len(q) == 0

    def test_queue_rejects_negative_time(self):
        with pytest.raises(ValueError):
            EventQueue().push(-1.0, EventKind.TRAIN_DONE)

    def test_latency_without_jitter(self):
        rng = np.random.default_rng(0)
        assert NO_JITTER.train_time(LatencyClass.SLOW, 2, rng) == pytest.approx(10.0)
        assert NO_JITTER.upload_time(LatencyClass.MEDIUM, rng) == pytest.approx(1.25)

    def test_latency_jitter_bounds(self):
        rng = np.random.default_rng(0)
        model = LatencyModel(jitter_pct=0.1)
        for _ in range(100):
            assert 0.9 <= model.train_time(LatencyClass.FAST, 1, rng) <= 1.1

    def test_latency_needs_every_class(self):
        with pytest.raises(ConfigError):
            LatencyModel(class_factor={'Fast': 1.0})

    def test_method_names(self):
        assert Method.parse('fedavg') is Method.FEDAVG
        assert Method.parse('SSAFLNoAdaptive') is Method.SSAFL_NO_ADAPTIVE
        with pytest.raises(ConfigError):
            Method.parse('FedProx')


@pytest.fixture
def config(tmp_path):
    return make_tiny_config(tmp_path / 'out')


class TestSSAFLRun:
    def test_same_seed_same_artifacts(self, config):
        first = run_ssafl(config, 7)
        second = run_ssafl(config, 7)
        assert first.trace.to_jsonl() == second.trace.to_jsonl()
        assert metrics_to_csv(first.metrics) == metrics_to_csv(second.metrics)

    def test_time_never_decreases(self, config):
        times = [e.time for e in run_ssafl(config, 7).trace.events]
        assert times == sorted(times)

    def test_gate_soundness(self, config):
        result = run_ssafl(config, 7)
        for e in kinds(result.trace, 'train_done'):
            assert e.accepted == (e.delta_norm >= e.eps)
            assert e.eps == result.thresholds[e.node]
        pending = Counter()
        for e in result.trace.events:
            if e.kind == 'train_done' and e.accepted:
                pending[e.node] += 1
            elif e.kind == 'upload':
                assert pending[e.node] > 0
                pending[e.node] -= 1

    def test_gamma_replay(self, config):
        result = run_ssafl(config, 7)
        replay = Counter()
        for e in kinds(result.trace, 'upload'):
            replay[e.node] += 1
            assert e.gamma == replay[e.node]
        for node, count in result.trace.gamma.items():
            assert replay[node] == count

    def test_window_weights(self, config):
        config = make_tiny_config(config.output_dir, aggregation=AggregationConfig(w_min=0.1, micro_batch=2))
        result = run_ssafl(config, 7)
        assert result.windows
        for window in result.windows:
            assert window.weights.sum() == pytest.approx(1.0, abs=1e-9)
            assert np.all(window.weights >= 0)
            assert len(window.deltas) == len(window.nodes)

    def test_one_metrics_row_per_aggregation(self, config):
        result = run_ssafl(config, 7)
        assert len(result.metrics) == result.trace.aggregations == len(kinds(result.trace, 'aggregate'))
        assert result.trace.aggregations <= config.stop.t_max

    def test_staleness_is_non_negative(self, config):
        for e in kinds(run_ssafl(config, 7).trace, 'upload'):
            assert e.tau >= 0

    def test_uniform_pre_weights_without_adaptation(self, config):
        config = make_tiny_config(config.output_dir, aggregation=AggregationConfig(w_min=0.0, micro_batch=2))
        result = run_method('SSAFLNoAdaptive', config, 7)
        assert result.method == 'SSAFLNoAdaptive'
        for window in result.windows:
            n = len(window.nodes)
            assert window.pre_weights == pytest.approx([1 / n] * n)

    def test_divergence_is_reported(self, config):
        config = make_tiny_config(config.output_dir, training=TrainingConfig(eta=500.0, local_epochs=1, batch=16))
        with pytest.raises(NonFiniteLoss):
            run_ssafl(config, 7)


class TestDirectSimulator:
    def build(self, config, clients, t_max=6):
        workload, _, _ = prepare_run(config, 7)
        return SSAFLSimulator(workload, clients, NO_JITTER, StopRule(t_max=t_max, patience=100), 7, 1,
                              AggregationConfig(w_min=0.1, micro_batch=1))

    def test_single_node_gets_full_weight(self, config):
        sim = self.build(config, [ClientState(1, LatencyClass.FAST, similarity=1.0, eps=0.0)])
        sim.run()
        assert sim.windows
        assert all(w.weights.tolist() == [1.0] for w in sim.windows)
        assert sim.trace.gamma[1] == sim.trace.aggregations

    def test_unreachable_threshold_never_uploads(self, config):
        sim = self.build(config, [
            ClientState(1, LatencyClass.FAST, similarity=1.0, eps=0.0),
            ClientState(2, LatencyClass.FAST, similarity=1.0, eps=1e9),
        ])
        sim.run()
        assert sim.trace.gamma[2] == 0
        assert sim.trace.rounds[2] > 0
        assert all(not e.accepted for e in kinds(sim.trace, 'train_done') if e.node == 2)

    def test_rejected_client_keeps_its_base(self, config):
        sim = self.build(config, [
            ClientState(1, LatencyClass.FAST, similarity=1.0, eps=0.0),
            ClientState(2, LatencyClass.FAST, similarity=1.0, eps=1e9),
        ])
        initial = sim.global_model
        sim.run()
        assert sim.version > 0
        rejected = sim.clients[2]
        assert rejected.base_version == 0
        assert np.array_equal(rejected.base.params, initial.params)
        last = kinds(sim.trace, 'train_done')
        last = [e for e in last if e.node == 2][-1]
        assert last.delta_norm == pytest.approx(np.linalg.norm(rejected.local.params - initial.params))

    def test_fast_nodes_upload_more_under_ssafl(self, config):
        workload, _, _ = prepare_run(config, 7)
        sim = SSAFLSimulator(workload, [
            ClientState(1, LatencyClass.FAST, similarity=1.0, eps=0.0),
            ClientState(2, LatencyClass.SLOW, similarity=1.0, eps=0.0),
        ], NO_JITTER, StopRule(t_max=12, patience=100), 7, 1, AggregationConfig())
        sim.run()
        assert sim.trace.gamma[1] > sim.trace.gamma[2] > 0

    def test_default_windows_batch_several_updates(self):
        assert AggregationConfig().micro_batch > 1

    def test_base_class_needs_a_server(self, config):
        workload, _, _ = prepare_run(config, 7)
        sim = AsyncSimulator(workload, [ClientState(1, LatencyClass.FAST)], NO_JITTER, StopRule(), 7, 1)
        with pytest.raises(NotImplementedError):
            sim.run()


class TestBaselines:
    def test_fedavg_rounds_are_synchronous(self, config):
        result = run_baseline('FedAvg', config, 7)
        counts = Counter()
        for e in result.trace.events:
            if e.kind == 'upload':
                counts[e.node] += 1
                assert e.tau == 0
            elif e.kind == 'aggregate':
                assert len(set(counts.values())) == 1
                assert len(counts) == config.data.n_nodes

    def test_fedasync_with_full_mixing_matches_quorum_of_one(self, config):
        config = make_tiny_config(config.output_dir, baselines=BaselineConfig(fedasync_alpha=1.0, semiasync_k=1))
        workload, population, strategy = prepare_run(config, 7)
        prepared = (workload, population[:1], strategy)
        fedasync = run_baseline('FedAsyn', config, 7, prepared=prepared)
        semiasync = run_baseline('SemiAsyn', config, 7, prepared=prepared)
        assert fedasync.trace.loss_history == semiasync.trace.loss_history
        assert fedasync.final == semiasync.final

    def test_full_quorum_matches_fedavg_timing(self, config):
        config = make_tiny_config(config.output_dir, latency=NO_JITTER,
                                  baselines=BaselineConfig(semiasync_k=config.data.n_nodes))
        fedavg = run_baseline('FedAvg', config, 7)
        semiasync = run_baseline('SemiAsyn', config, 7)
        assert [e.time for e in kinds(fedavg.trace, 'aggregate')] == \
            [e.time for e in kinds(semiasync.trace, 'aggregate')]
        assert [loss for _, loss in semiasync.trace.loss_history] == \
            pytest.approx([loss for _, loss in fedavg.trace.loss_history])

    def test_fast_nodes_upload_more_under_fedasync(self, config):
        config = make_tiny_config(config.output_dir, stop=StopRule(t_max=30, patience=100))
        gamma = run_baseline('FedAsyn', config, 7).trace.gamma
        # nodes 1 and 4 are Fast, node 3 is Slow
        assert gamma[1] > gamma[3]
        assert gamma[4] > gamma[3]

    def test_fast_nodes_upload_more_under_semiasync(self, config):
        config = make_tiny_config(config.output_dir, stop=StopRule(t_max=30, patience=100, max_sim_time=5000.0))
        gamma = run_baseline('SemiAsyn', config, 7).trace.gamma
        assert gamma[1] > gamma[3]
        assert gamma[4] > gamma[3]

    def test_ssafl_uploads_least_over_the_same_time_budget(self, config):
        horizon = StopRule(t_max=100000, loss_floor=0.0, patience=100000, max_sim_time=60.0)
        config = make_tiny_config(config.output_dir, latency=NO_JITTER, stop=horizon,
                                  baselines=BaselineConfig(semiasync_k=1))
        ssafl = run_ssafl(config, 7).trace.total_uploads
        assert ssafl > 0
        assert ssafl < run_baseline('FedAsyn', config, 7).trace.total_uploads
        assert ssafl < run_baseline('SemiAsyn', config, 7).trace.total_uploads

    def test_quorum_larger_than_population_is_clamped(self, config):
        config = make_tiny_config(config.output_dir, baselines=BaselineConfig(semiasync_k=50))
        result = run_baseline('SemiAsyn', config, 7)
        assert result.trace.aggregations > 0

    def test_ssafl_is_not_a_baseline(self, config):
        with pytest.raises(ConfigError):
            run_baseline('SSAFL', config, 7)
