import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedgmm.gmm import InvalidInputError
from fedgmm.partition import (
    LabeledDataset,
    OodKind,
    OodSpec,
    PartitionSpec,
    build_anomaly_testset,
    gen_mixture_dataset,
    largest_remainder,
    partition_dirichlet,
    partition_quantity,
    split_indices,
)


def labelled(n_per_class, m):
    labels = np.repeat(np.arange(m), n_per_class)
    return LabeledDataset(np.zeros((labels.size, 1)), labels)


def assert_exact_cover(partition, n):
    flat = np.concatenate(partition.assignments)
    assert flat.size == n
    np.testing.assert_array_equal(np.sort(flat), np.arange(n))


class TestGenerator:
    def test_class_variance_in_raw_units(self):
        data, truth = gen_mixture_dataset(3, 4, 3000, 1.0, seed=0)
        span = 1.0 / np.sqrt(truth.covariances[0] / 0.01)
        for m in range(3):
            raw_var = data.rows[data.labels == m].var(axis=0) * span**2
            np.testing.assert_allclose(raw_var, 0.01, rtol=0.15)

    def test_single_class(self):
        data, truth = gen_mixture_dataset(1, 3, 50, seed=1)
        assert set(data.labels) == {0} and truth.n_components == 1

    def test_features_normalised(self):
        data, _ = gen_mixture_dataset(4, 3, 1000, seed=2)
        assert data.rows.min() == 0.0 and data.rows.max() == 1.0

    def test_class_means_match_generator(self):
        n, m = 20000, 5
        data, truth = gen_mixture_dataset(m, 8, n, 1.0, seed=3)
        sigma = np.sqrt(truth.covariances[0])
        for c in range(m):
            emp = data.rows[data.labels == c].mean(axis=0)
            assert np.all(np.abs(emp - truth.means[c]) < 4 * sigma / np.sqrt(n / m))

    def test_deterministic(self):
        a, _ = gen_mixture_dataset(3, 2, 100, seed=5)
        b, _ = gen_mixture_dataset(3, 2, 100, seed=5)
        np.testing.assert_array_equal(a.rows, b.rows)


class TestLargestRemainder:
    def test_sums_to_total(self):
        assert largest_remainder(10, np.array([1, 1, 1])).tolist() == [4, 3, 3]

    @given(st.integers(0, 500), st.lists(st.floats(0.01, 10), min_size=1, max_size=12))
    def test_total_and_closeness(self, total, props):
        p = np.array(props)
        counts = largest_remainder(total, p)
        assert counts.sum() == total
        assert np.all(np.abs(counts - total * p / p.sum()) < 1.0)


class TestDirichlet:
    def test_single_client(self):
        part = partition_dirichlet(labelled(10, 3), 1, 0.5, 0)
        np.testing.assert_array_equal(part.assignments[0], np.arange(30))

    @settings(max_examples=40, deadline=None)
    @given(st.floats(0.05, 5.0), st.integers(1, 15), st.integers(0, 2**32 - 1))
    def test_exact_cover_and_nonempty(self, alpha, n_clients, seed):
        data = labelled(20, 4)
        part = partition_dirichlet(data, n_clients, alpha, seed)
        assert_exact_cover(part, 80)
        assert all(a.size >= 1 for a in part.assignments)

    def test_concentration_at_small_alpha(self):
        data = labelled(600, 10)
        medians = []
        for seed in range(20):
            part = partition_dirichlet(data, 10, 0.1, seed)
            owner = np.empty(6000, dtype=int)
            for c, idx in enumerate(part.assignments):
                owner[idx] = c
            shares = []
            for m in range(10):
                counts = np.bincount(owner[data.labels == m], minlength=10)
                shares.append(np.sort(counts)[-2:].sum() / counts.sum())
            medians.append(np.median(shares))
        assert np.median(medians) >= 0.8

    def test_mean_proportion_is_uniform(self):
        data = labelled(1000, 1)
        n_clients, draws = 5, 400
        props = np.zeros((draws, n_clients))
        for s in range(draws):
            part = partition_dirichlet(data, n_clients, 0.7, s)
            props[s] = [a.size / 1000 for a in part.assignments]
        se = props.std(axis=0, ddof=1) / np.sqrt(draws)
        assert np.all(np.abs(props.mean(axis=0) - 1 / n_clients) < 3 * se)

    def test_too_many_clients(self):
        with pytest.raises(InvalidInputError):
            partition_dirichlet(labelled(1, 2), 3, 1.0, 0)

    def test_deterministic(self):
        data = labelled(30, 3)
        a = partition_dirichlet(data, 4, 0.3, 11)
        b = partition_dirichlet(data, 4, 0.3, 11)
        assert all(np.array_equal(x, y) for x, y in zip(a.assignments, b.assignments))


class TestQuantity:
    def test_all_classes_even_split(self):
        data = labelled(103, 3)
        part = partition_quantity(data, 4, 3, 0)
        for m in range(3):
            sizes = [np.sum(data.labels[a] == m) for a in part.assignments]
            assert max(sizes) - min(sizes) <= 1

    def test_one_class_per_client(self):
        data = labelled(50, 4)
        part = partition_quantity(data, 6, 1, 2)
        for a in part.assignments:
            assert np.unique(data.labels[a]).size == 1

    def test_two_of_three_classes(self):
        data = labelled(4000, 3)
        part = partition_quantity(data, 12, 2, 7)
        assert_exact_cover(part, 12000)
        for a in part.assignments:
            assert np.unique(data.labels[a]).size == 2

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 5), st.integers(1, 10), st.integers(0, 10_000))
    def test_coverage(self, alpha, n_clients, seed):
        data = labelled(60, 5)
        if n_clients * alpha < 5:
            with pytest.raises(InvalidInputError):
                partition_quantity(data, n_clients, alpha, seed)
            return
        part = partition_quantity(data, n_clients, alpha, seed)
        assert_exact_cover(part, 300)
        held = [set(data.labels[a]) for a in part.assignments]
        assert set().union(*held) == set(range(5))
        assert all(len(h) == alpha for h in held)

    def test_invalid_alpha(self):
        with pytest.raises(InvalidInputError):
            partition_quantity(labelled(5, 2), 2, 3, 0)

    def test_spec_dispatch(self):
        data = labelled(10, 2)
        spec = PartitionSpec("quantity", 1, 2, seed=0)
        assert_exact_cover(spec.apply(data), 20)
        with pytest.raises(InvalidInputError):
            PartitionSpec("quantity", 1.5, 2)


class TestAnomalyTestset:
    def test_counts_and_bounds(self):
        data, _ = gen_mixture_dataset(3, 4, 2000, seed=1)
        rows, labels = build_anomaly_testset(data, OodSpec(), 1000, seed=2)
        assert labels.sum() == 100 and rows.shape == (1000, 4)
        assert rows.min() >= 0.0 and rows.max() <= 1.0

    def test_default_ratio(self):
        assert OodSpec().anomaly_ratio == 0.10 and OodSpec().variance == 0.005

    def test_zero_variance_rejected(self):
        with pytest.raises(InvalidInputError):
            OodSpec(variance=0.0)

    def test_shift_with_separate_source(self):
        inliers = LabeledDataset(np.full((50, 2), 0.5), np.zeros(50, dtype=int))
        source = LabeledDataset(np.full((50, 2), 0.2), np.zeros(50, dtype=int))
        spec = OodSpec(OodKind.MIXTURE_SHIFT, delta=(0.1, 0.9), anomaly_ratio=0.2)
        rows, labels = build_anomaly_testset(inliers, spec, 40, 0, ood_source=source)
        np.testing.assert_allclose(rows[labels == 1], [[0.3, 1.0]] * 8)
        np.testing.assert_allclose(rows[labels == 0], 0.5)

    def test_pool_too_small(self):
        with pytest.raises(InvalidInputError):
            build_anomaly_testset(labelled(2, 2), OodSpec(), 10)


def test_split_indices_disjoint():
    parts = split_indices(1000, [0.7, 0.2, 0.1], seed=3)
    assert [p.size for p in parts] == [700, 200, 100]
    np.testing.assert_array_equal(np.sort(np.concatenate(parts)), np.arange(1000))
