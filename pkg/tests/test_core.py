import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from collab_ad.core import (
    ContrastiveBatch,
    EvalReport,
    TaskCollection,
    TaskDataset,
    TaskEmbedding,
    ValidationError,
    embedding_table,
    embeddings_from_table,
    validate_collection,
)


def two_tasks(w=(0.5, 0.5), d=3):
    rng = np.random.default_rng(0)
    return TaskCollection([TaskDataset(0, rng.normal(size=(4, d)), w[0]),
                           TaskDataset(1, rng.normal(size=(5, d)), w[1])], d)


class TestValidateCollection:
    def test_valid_two_task_collection(self):
        validate_collection(two_tasks())

    def test_weight_sum_error(self):
        with pytest.raises(ValidationError) as e:
            validate_collection(two_tasks((0.5, 0.6)))
        assert e.value.kind == "weight-sum"

    def test_nan_sample_rejected(self):
        X = np.zeros((3, 3))
        X[1, 2] = np.nan
        c = TaskCollection([TaskDataset(0, X, 1.0)], 3)
        with pytest.raises(ValidationError) as e:
            validate_collection(c)
        assert e.value.kind == "non-finite-value" and e.value.task_id == 0

    def test_dimension_mismatch(self):
        c = TaskCollection([TaskDataset(0, np.zeros((2, 3)), 0.5), TaskDataset(1, np.zeros((2, 2)), 0.5)], 3)
        with pytest.raises(ValidationError, match="dimension-mismatch"):
            validate_collection(c)

    def test_empty_task(self):
        c = TaskCollection([TaskDataset(0, np.zeros((2, 3)), 0.5), TaskDataset(1, np.zeros((0, 3)), 0.5)], 3)
        with pytest.raises(ValidationError, match="empty-task"):
            validate_collection(c)

    def test_sparse_task_ids(self):
        c = TaskCollection([TaskDataset(0, np.zeros((2, 3)), 0.5), TaskDataset(2, np.zeros((2, 3)), 0.5)], 3)
        with pytest.raises(ValidationError, match="task-id"):
            validate_collection(c)

    def test_zero_weight(self):
        with pytest.raises(ValidationError, match="weight-range"):
            validate_collection(two_tasks((1.0, 0.0)))

    def test_label_count(self):
        c = TaskCollection([TaskDataset(0, np.zeros((3, 2)), 1.0, labels=[0, 1])], 2)
        with pytest.raises(ValidationError, match="label-count"):
            validate_collection(c)

    def test_pure(self):
        c = two_tasks((0.5, 0.6))
        msgs = []
        for _ in range(2):
            with pytest.raises(ValidationError) as e:
                validate_collection(c)
            msgs.append(str(e.value))
        assert msgs[0] == msgs[1]


class TestTaskCollection:
    def test_default_weights_are_sample_shares(self):
        c = TaskCollection.from_samples([np.zeros((3, 2)), np.ones((1, 2))])
        np.testing.assert_allclose(c.weights, [0.75, 0.25])
        validate_collection(c)

    def test_population_is_union(self):
        c = two_tasks()
        ids, X = c.population
        assert len(X) == 9
        np.testing.assert_array_equal(X[ids == 1], c.tasks[1].samples)

    def test_samples_are_read_only(self):
        c = two_tasks()
        with pytest.raises(ValueError):
            c.tasks[0].samples[0, 0] = 1.0

    def test_labels_available(self):
        c = TaskCollection.from_samples([np.zeros((2, 1))], labels=[np.array([0, 1])])
        assert c.labels_available()
        assert not two_tasks().labels_available()

    def test_empty_input(self):
        with pytest.raises(ValidationError, match="empty-collection"):
            TaskCollection.from_samples([])


class TestEmbeddings:
    def test_table_round_trip(self):
        T = np.arange(6.0).reshape(3, 2)
        np.testing.assert_array_equal(embedding_table(embeddings_from_table(T)), T)

    def test_table_orders_by_id(self):
        embs = [TaskEmbedding(1, [1.0]), TaskEmbedding(0, [0.0])]
        np.testing.assert_array_equal(embedding_table(embs), [[0.0], [1.0]])

    def test_non_finite_embedding(self):
        with pytest.raises(ValidationError):
            TaskEmbedding(0, [np.inf])

    def test_unequal_lengths(self):
        with pytest.raises(ValidationError):
            embedding_table([TaskEmbedding(0, [1.0]), TaskEmbedding(1, [1.0, 2.0])])


def test_contrastive_batch_shapes():
    ContrastiveBatch(np.zeros(2, int), np.zeros((2, 1)), np.zeros((2, 1)))
    with pytest.raises(ValidationError):
        ContrastiveBatch(np.zeros(2, int), np.zeros((2, 1)), np.zeros((1, 1)))
    with pytest.raises(ValidationError):
        ContrastiveBatch(np.zeros(0, int), np.zeros((0, 1)), np.zeros((0, 1)))


class TestEvalReport:
    def test_mean_and_digest(self):
        r = EvalReport({0: 0.5, 1: 1.0}, {"seed": 1, "k": 3})
        assert r.mean_auc == 0.75
        assert r.config_digest == '{"k":3,"seed":1}'
        doc = json.loads(r.to_json())
        assert doc["per_task_auc"] == {"0": 0.5, "1": 1.0}

    def test_table_lists_skipped(self):
        r = EvalReport({0: 0.9}, {}, skipped=[3])
        assert "skipped tasks: 3" in r.to_table()

    def test_empty_report_mean_is_nan(self):
        assert np.isnan(EvalReport({}, {}).mean_auc)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 4)),
              elements=st.floats(-1e6, 1e6, allow_nan=False)))
def test_json_report_round_trip_is_exact(X):
    r = EvalReport({i: float(v) for i, v in enumerate(X.ravel())}, {"x": X.tolist()})
    doc = json.loads(r.to_json())
    assert [doc["per_task_auc"][str(i)] for i in range(X.size)] == X.ravel().tolist()
