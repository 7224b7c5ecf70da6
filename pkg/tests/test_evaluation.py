import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from collab_ad.core import EvalReport, TaskCollection, ValidationError
from collab_ad.evaluation import (
    UndefinedCorrelationError,
    auc,
    auc_bruteforce,
    evaluate_scorer,
    expected_kl,
    gaussian_log_ratio,
    kl_divergence_discrete,
    ratio_grid,
    ratio_recovery_error,
    report_basename,
    similarity_rank_correlation,
    simplex_grid,
    verify_base_optimality,
    write_matrix_csv,
    write_report,
)

scores = st.lists(st.integers(0, 6).map(lambda v: v / 3.0), min_size=1, max_size=25)


class TestAuc:
    def test_perfect(self):
        assert auc([3, 4], [1, 2]) == 1.0

    def test_all_ties(self):
        assert auc([1, 1, 1], [1, 1]) == 0.5

    def test_hand_case(self):
        assert auc([0.9, 0.4], [0.5, 0.1]) == 0.75
        assert auc_bruteforce([0.9, 0.4], [0.5, 0.1]) == 0.75

    def test_empty_side(self):
        with pytest.raises(ValidationError):
            auc([], [1.0])

    @settings(max_examples=300, deadline=None)
    @given(scores, scores)
    def test_matches_pair_counting_exactly(self, a, b):
        assert auc(a, b) == auc_bruteforce(a, b)

    @settings(max_examples=200, deadline=None)
    @given(scores, scores)
    def test_swap_complement(self, a, b):
        assert auc(a, b) + auc(b, a) == pytest.approx(1.0, abs=1e-12)

    @settings(max_examples=200, deadline=None)
    @given(scores, scores)
    def test_increasing_transform_invariance(self, a, b):
        f = lambda v: np.exp(3 * np.asarray(v)) - 7
        assert auc(f(a), f(b)) == auc(a, b)


class TestKl:
    def test_identical(self):
        assert kl_divergence_discrete([0.2, 0.8], [0.2, 0.8]) == 0.0

    def test_point_mass(self):
        assert kl_divergence_discrete([1, 0], [0.5, 0.5]) == pytest.approx(0.693147, abs=1e-6)

    def test_support_violation(self):
        with pytest.raises(ValidationError):
            kl_divergence_discrete([0.5, 0.5], [1.0, 0.0])

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.floats(0.01, 1), min_size=2, max_size=6), st.data())
    def test_gibbs(self, q, data):
        p = data.draw(st.lists(st.floats(0.01, 1), min_size=len(q), max_size=len(q)))
        q, p = np.array(q) / sum(q), np.array(p) / sum(p)
        assert kl_divergence_discrete(q, p) >= -1e-15


class TestBaseOptimality:
    def test_grid_size(self):
        assert len(simplex_grid(3, 200)) == math.comb(202, 2)
        np.testing.assert_allclose(simplex_grid(3, 7).sum(1), 1.0)

    def test_hand_case(self):
        r = verify_base_optimality([[0.7, 0.2, 0.1], [0.1, 0.2, 0.7]], [0.5, 0.5])
        assert r.passed
        np.testing.assert_allclose(r.mixture, [0.4, 0.2, 0.4])
        np.testing.assert_allclose(r.grid_argmin, [0.4, 0.2, 0.4])

    def test_single_task(self):
        r = verify_base_optimality([[0.25, 0.5, 0.25]], [1.0])
        assert r.passed and r.j_mixture == 0.0 and r.j_grid_min == 0.0

    def test_degenerate_weight(self):
        q1 = [0.3, 0.3, 0.4]
        r = verify_base_optimality([q1, [0.1, 0.1, 0.8]], [1.0, 0.0])
        assert r.passed and r.j_mixture == 0.0
        np.testing.assert_allclose(r.grid_argmin, q1)

    def test_random_instances(self, rng):
        for _ in range(50):
            r = verify_base_optimality(list(rng.dirichlet(np.ones(3), size=2)), rng.dirichlet(np.ones(2)))
            assert r.passed

    def test_off_support_is_infinite(self):
        J = expected_kl([np.array([0.5, 0.5])], [1.0], np.array([[1.0, 0.0]]))
        assert np.isinf(J[0])

    def test_limits(self):
        with pytest.raises(ValidationError):
            verify_base_optimality([np.full(6, 1 / 6)], [1.0])
        with pytest.raises(ValidationError):
            verify_base_optimality([np.full(5, 0.2)], [1.0], resolution=200)
        with pytest.raises(ValidationError):
            verify_base_optimality([[0.5, 0.5], [0.5, 0.5]], [0.5, 0.6])


class TestRatioRecovery:
    def test_grid(self):
        g = ratio_grid()
        assert len(g) == 41 and g[0] == -2.0 and g[-1] == pytest.approx(2.0)

    def test_closed_form(self):
        g = ratio_grid()
        np.testing.assert_allclose(gaussian_log_ratio(g, (1, 1), (0, 1)), g - 0.5, atol=1e-14)

    def test_equal_distributions_error_is_max_abs(self):
        assert ratio_recovery_error(lambda x: 0.03 * x, (0, 1), (0, 1)) == pytest.approx(0.06)

    def test_exact_scorer(self):
        assert ratio_recovery_error(lambda x: x - 0.5, (1, 1), (0, 1)) < 1e-14


class TestRankCorrelation:
    def test_identity_and_negation(self):
        T = np.array([[3, 1, 0], [1, 3, 2], [0, 2, 3]], dtype=float)
        assert similarity_rank_correlation(T, T) == pytest.approx(1.0)
        assert similarity_rank_correlation(-T, T) == pytest.approx(-1.0)

    def test_hand_case(self):
        assert similarity_rank_correlation(np.array([1, 2, 3.0]), np.array([1, 3, 2.0])) == pytest.approx(0.5)

    def test_constant_input(self):
        with pytest.raises(UndefinedCorrelationError):
            similarity_rank_correlation(np.ones(3), np.array([1, 2, 3.0]))


class Bench:
    def __init__(self, nominal, anomalous):
        self.test_nominal, self.test_anomalous = nominal, anomalous
        self.num_tasks = len(nominal)


class TestEvaluateScorer:
    def test_per_task_auc_and_skips(self):
        b = Bench([np.array([[2.0], [3.0]]), np.zeros((0, 1))], [np.array([[0.0], [2.5]]), np.ones((2, 1))])
        r = evaluate_scorer(lambda t, X: X[:, 0], b, {"k": 1})
        assert r.per_task_auc == {0: 0.75} and r.skipped == [1]

    def test_report_files_are_stable(self, tmp_path):
        r = EvalReport({0: 0.8, 1: 0.6}, {"seed": 3})
        a = write_report(r, tmp_path / "a", "exp", 3)
        b = write_report(r, tmp_path / "b", "exp", 3)
        assert a[0].endswith(report_basename("exp", 3) + ".json")
        assert open(a[0]).read() == open(b[0]).read()
        assert "mean" in open(a[1]).read()

    def test_matrix_csv(self, tmp_path):
        write_matrix_csv(tmp_path / "m.csv", np.eye(2), ["x", "y"])
        lines = (tmp_path / "m.csv").read_text().splitlines()
        assert lines[0] == "task,x,y" and lines[1].startswith("x,1.0")


@given(st.integers(1, 4), st.integers(1, 12))
def test_simplex_grid_enumerates_the_lattice(k, res):
    G = simplex_grid(k, res)
    assert len(G) == math.comb(res + k - 1, k - 1)
    assert np.allclose(G.sum(axis=1), 1.0) and G.min() >= 0.0
    assert len({tuple(np.round(g * res).astype(int)) for g in G}) == len(G)
