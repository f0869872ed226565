from collections import Counter

import numpy as np
import pytest

from ssaflsim.datagen import ACTION_VOCABULARY, DataSpec, generate_dataset, generate_population
from ssaflsim.errors import BadSpec, ConfigError
from ssaflsim.similarity_engine import LatencyClass


class TestDataset:
    def test_same_seed_same_data(self):
        spec = DataSpec(n_nodes=4, samples_per_node=(20, 30), input_dim=6, test_samples=50, seed=11)
        first, test_a, _ = generate_dataset(spec)
        second, test_b, _ = generate_dataset(spec)
        for a, b in zip(first, second):
            assert np.array_equal(a.inputs, b.inputs)
            assert np.array_equal(a.targets, b.targets)
        assert np.array_equal(test_a.targets, test_b.targets)

    def test_different_seed_different_data(self):
        a, _, _ = generate_dataset(DataSpec(n_nodes=3, seed=1))
        b, _, _ = generate_dataset(DataSpec(n_nodes=3, seed=2))
        assert not np.array_equal(a[0].inputs[:5], b[0].inputs[:5])

    def test_partition_sizes_and_widths(self):
        spec = DataSpec(n_nodes=6, samples_per_node=(10, 15), input_dim=8, test_samples=40)
        partitions, test, _ = generate_dataset(spec)
        assert len(partitions) == 6
        assert all(10 <= p.size <= 15 and p.input_dim == 8 for p in partitions)
        assert test.size == 40

    def test_targets_in_unit_interval(self):
        partitions, test, _ = generate_dataset(DataSpec(n_nodes=5, noise_sd=0.3))
        for d in partitions + [test]:
            assert d.targets.min() >= 0.0
            assert d.targets.max() <= 1.0

    def test_zero_shift_is_iid(self):
        spec = DataSpec(n_nodes=4, samples_per_node=(400, 400), input_dim=6, context_shift=0.0, noise_sd=0.0)
        partitions, _, truth = generate_dataset(spec)
        assert np.all(truth.context_means == 0.0)
        for p in partitions:
            assert np.all(np.abs(p.inputs.mean(axis=0)) < 0.3)

    def test_context_block_follows_node_shift(self):
        spec = DataSpec(n_nodes=3, samples_per_node=(2000, 2000), input_dim=6, context_shift=3.0)
        partitions, _, truth = generate_dataset(spec)
        k = spec.strategy_dim
        for i, p in enumerate(partitions):
            assert p.inputs[:, k:].mean(axis=0) == pytest.approx(truth.context_means[i], abs=0.15)
            assert np.all(np.abs(p.inputs[:, :k].mean(axis=0)) < 0.15)
        assert np.all(np.linalg.norm(truth.context_means, axis=1) <= 3.0 + 1e-12)

    def test_noise_free_targets_are_the_sigmoid(self):
        spec = DataSpec(n_nodes=2, samples_per_node=(30, 30), input_dim=4, noise_sd=0.0)
        partitions, _, truth = generate_dataset(spec)
        X = partitions[0].inputs
        a, b = truth.pair
        z = X @ truth.v + truth.u * X[:, a] * X[:, b]
        assert partitions[0].targets == pytest.approx(1 / (1 + np.exp(-z)))

    @pytest.mark.parametrize('changes,field', [
        ({'n_nodes': 1}, 'n_nodes'),
        ({'input_dim': 1}, 'input_dim'),
        ({'samples_per_node': (5, 3)}, 'samples_per_node'),
        ({'samples_per_node': (0, 3)}, 'samples_per_node'),
        ({'noise_sd': -0.1}, 'noise_sd'),
        ({'test_samples': 1}, 'test_samples'),
    ])
    def test_bad_spec(self, changes, field):
        with pytest.raises(BadSpec) as info:
            DataSpec(**changes)
        assert info.value.field == field
        assert isinstance(info.value, ConfigError)


class TestPopulation:
    def test_latency_classes_round_robin(self):
        population = generate_population(DataSpec(n_nodes=10), 4, seed=0)
        counts = Counter(p.latency_class for p in population)
        assert counts == {LatencyClass.FAST: 4, LatencyClass.MEDIUM: 3, LatencyClass.SLOW: 3}
        assert [p.node_id for p in population] == list(range(1, 11))

    def test_deterministic(self):
        spec = DataSpec(n_nodes=6)
        assert generate_population(spec, 5, seed=3) == generate_population(spec, 5, seed=3)

    def test_history_lengths(self):
        for p in generate_population(DataSpec(n_nodes=20), 8, seed=1):
            assert 1 <= len(p.history) <= 5
            for s in p.history:
                assert all(a.kind in ACTION_VOCABULARY for a in s.actions)

    def test_single_entry_pool_holds_base_strategy(self, operator_strategy):
        population = generate_population(DataSpec(n_nodes=4), 1, seed=0, base_strategy=operator_strategy)
        assert all(p.history == (operator_strategy,) for p in population)

    def test_pool_entries_are_base_or_synthetic(self, operator_strategy):
        population = generate_population(DataSpec(n_nodes=8), 3, seed=5, base_strategy=operator_strategy)
        for p in population:
            for s in p.history:
                assert s == operator_strategy or s.user.startswith('pool_')

    def test_empty_pool(self):
        with pytest.raises(BadSpec):
            generate_population(DataSpec(), 0, seed=0)
