import itertools
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from collab_ad.core import ValidationError, validate_collection
from collab_ad.synth import (
    SynthConfig,
    generate,
    ground_truth_overlap,
    overlap_matrix,
    restricted_benchmark,
    task_count,
)


@pytest.mark.parametrize("k,expected", [(2, 45), (3, 120), (4, 210), (5, 252)])
def test_task_counts(k, expected):
    assert task_count(10, k) == expected
    b = generate(SynthConfig(L=10, d=10, k=k, n_per_category=1000, seed=0))
    assert b.num_tasks == expected
    validate_collection(b.train)


def test_k_equals_l_single_task():
    b = generate(SynthConfig(L=3, d=3, k=3, n_per_category=50))
    assert b.num_tasks == 1
    assert b.train.tasks[0].size == 3 * 40
    assert len(b.test_anomalous[0]) == 0


@pytest.fixture(scope="module")
def bench():
    return generate(SynthConfig(L=6, d=6, k=2, n_per_category=500, seed=1))


class TestPartition:
    def test_every_training_sample_in_one_task(self, bench):
        _, X = bench.train.population
        assert len(X) == 6 * 400
        assert len({row.tobytes() for row in X}) == len(X)

    def test_labels_belong_to_active_sets(self, bench):
        for t, act in zip(bench.train.tasks, bench.active):
            assert set(np.unique(t.labels)) <= set(act)

    def test_counts_are_balanced(self, bench):
        sizes = np.array([t.size for t in bench.train.tasks])
        p = 1 / math.comb(5, 1)
        sd = math.sqrt(2 * 400 * p * (1 - p))
        assert np.all(np.abs(sizes - sizes.mean()) < 3 * sd)

    def test_test_pools_non_empty(self, bench):
        assert all(len(n) and len(a) for n, a in zip(bench.test_nominal, bench.test_anomalous))

    def test_nominal_test_rows_match_active_categories(self, bench):
        for t, act in enumerate(bench.active):
            assert len(bench.test_nominal[t]) == 100 * len(act)
            assert len(bench.test_anomalous[t]) == 100 * (6 - len(act))


def test_reproducible():
    a = generate(SynthConfig(L=4, d=4, k=2, n_per_category=100, seed=7))
    b = generate(SynthConfig(L=4, d=4, k=2, n_per_category=100, seed=7))
    for ta, tb in zip(a.train.tasks, b.train.tasks):
        np.testing.assert_array_equal(ta.samples, tb.samples)
    np.testing.assert_array_equal(a.test_X, b.test_X)


class TestConfig:
    def test_k_above_l(self):
        with pytest.raises(ValidationError):
            generate(SynthConfig(L=3, d=3, k=4))

    def test_default_centers_need_room(self):
        with pytest.raises(ValidationError):
            generate(SynthConfig(L=5, d=3))

    def test_explicit_centers(self):
        b = generate(SynthConfig(L=3, d=2, k=1, n_per_category=20, centers=[[0, 0], [5, 0], [0, 5]]))
        assert b.train.feature_dim == 2

    def test_duplicate_centers(self):
        with pytest.raises(ValidationError):
            generate(SynthConfig(L=2, d=1, centers=[[1.0], [1.0]]))

    def test_starved_tasks(self):
        with pytest.raises(ValidationError, match="empty-task"):
            generate(SynthConfig(L=10, d=10, k=5, n_per_category=2))


class TestOverlap:
    def test_examples(self):
        b = generate(SynthConfig(L=5, d=5, k=3, n_per_category=200))
        i = b.active.index((0, 1, 2))
        assert ground_truth_overlap(b, i, i) == 3
        assert ground_truth_overlap(b, i, b.active.index((2, 3, 4))) == 1

    def test_disjoint(self):
        assert overlap_matrix([(0, 1), (2, 3)])[0, 1] == 0

    def test_restricted_benchmark(self):
        base = generate(SynthConfig(L=4, d=4, k=1, n_per_category=100))
        other = restricted_benchmark(base, 2)
        assert other.num_tasks == 6 and other.config.seed == base.config.seed + 1


@given(st.integers(1, 7).flatmap(lambda L: st.tuples(st.just(L), st.integers(1, L))))
def test_overlap_matrix_structure(Lk):
    L, k = Lk
    active = [list(c) for c in itertools.combinations(range(L), k)]
    O = overlap_matrix(active)
    assert O.shape == (task_count(L, k),) * 2 == (math.comb(L, k),) * 2
    assert np.array_equal(O, O.T) and np.all(np.diag(O) == k)
    assert O.min() >= max(0, 2 * k - L)
