"""Domain types shared across the package.

Everything here is plain data: feature matrices, per-task datasets, the
population they form, embeddings and evaluation reports.  Arrays are
float64 and treated as read-only once a container is built.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

WEIGHT_TOL = 1e-9


class CADError(Exception):
    """Base class for errors raised by this package."""


class ValidationError(CADError, ValueError):
    """A container violates one of its invariants."""

    def __init__(self, kind: str, message: str, task_id: Optional[int] = None):
        self.kind = kind
        self.task_id = task_id
        prefix = f"[{kind}]" if task_id is None else f"[{kind}] task {task_id}:"
        super().__init__(f"{prefix} {message}")


class DataError(CADError):
    """Input files are malformed or inconsistent."""


class TrainingError(CADError):
    """Optimisation diverged (non-finite loss or gradient)."""


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class TaskDataset:
    """Nominal samples of one task.

    ``samples`` is an ``(n, d)`` matrix, one row per feature vector.
    ``labels`` optionally holds one integer category per row; it is only
    consumed by embedding initialisers that need side information and by
    evaluation, never by scoring code.
    """

    task_id: int
    samples: np.ndarray
    weight: float
    labels: Optional[np.ndarray] = None

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=np.float64)
        if s.ndim == 1:
            s = s.reshape(1, -1) if s.size else s.reshape(0, 0)
        object.__setattr__(self, "samples", _frozen(s))
        if self.labels is not None:
            lab = np.array(self.labels, dtype=np.int64, copy=True)
            lab.setflags(write=False)
            object.__setattr__(self, "labels", lab)

    @property
    def size(self) -> int:
        return int(self.samples.shape[0])


@dataclass(frozen=True)
class TaskCollection:
    """All tasks of one experiment plus the pooled population."""

    tasks: tuple
    feature_dim: int

    def __post_init__(self):
        object.__setattr__(self, "tasks", tuple(self.tasks))

    @classmethod
    def from_samples(
        cls,
        samples: Sequence[np.ndarray],
        labels: Optional[Sequence[Optional[np.ndarray]]] = None,
        weights: Optional[Sequence[float]] = None,
    ) -> "TaskCollection":
        """Build a collection; weights default to each task's sample share."""
        if len(samples) == 0:
            raise ValidationError("empty-collection", "no tasks given")
        mats = [np.atleast_2d(np.asarray(s, dtype=np.float64)) for s in samples]
        if weights is None:
            counts = np.array([m.shape[0] for m in mats], dtype=np.float64)
            total = counts.sum()
            weights = counts / total if total > 0 else np.full(len(mats), 1.0 / len(mats))
        if labels is None:
            labels = [None] * len(mats)
        tasks = [
            TaskDataset(t, m, float(w), lab)
            for t, (m, w, lab) in enumerate(zip(mats, weights, labels))
        ]
        return cls(tuple(tasks), int(mats[0].shape[1]))

    @property
    def num_tasks(self) -> int:
        return len(self.tasks)

    @property
    def weights(self) -> np.ndarray:
        return np.array([t.weight for t in self.tasks], dtype=np.float64)

    @property
    def population(self) -> tuple[np.ndarray, np.ndarray]:
        """``(task_ids, X)``: the flattened multiset of all task samples."""
        ids = np.concatenate(
            [np.full(t.size, t.task_id, dtype=np.int64) for t in self.tasks]
        )
        X = np.concatenate([t.samples for t in self.tasks], axis=0)
        return ids, X

    def labels_available(self) -> bool:
        return all(t.labels is not None for t in self.tasks)


def validate_collection(c: TaskCollection) -> None:
    """Raise :class:`ValidationError` unless every invariant holds."""
    if c.num_tasks == 0:
        raise ValidationError("empty-collection", "collection has no tasks")
    d = c.feature_dim
    if d <= 0:
        raise ValidationError("dimension-mismatch", f"feature_dim must be positive, got {d}")
    for i, t in enumerate(c.tasks):
        if t.task_id != i:
            raise ValidationError("task-id", f"expected dense id {i}", t.task_id)
        if t.size == 0:
            raise ValidationError("empty-task", "no samples", t.task_id)
        if t.samples.shape[1] != d:
            raise ValidationError(
                "dimension-mismatch",
                f"samples have dimension {t.samples.shape[1]}, expected {d}",
                t.task_id,
            )
        if not np.all(np.isfinite(t.samples)):
            raise ValidationError("non-finite-value", "samples contain NaN or Inf", t.task_id)
        if not (0.0 < t.weight <= 1.0):
            raise ValidationError("weight-range", f"weight {t.weight} outside (0, 1]", t.task_id)
        if t.labels is not None and t.labels.shape[0] != t.size:
            raise ValidationError("label-count", "labels do not match samples", t.task_id)
    total = float(np.sum(c.weights))
    if abs(total - 1.0) > WEIGHT_TOL:
        raise ValidationError("weight-sum", f"task weights sum to {total!r}, expected 1")


@dataclass(frozen=True)
class TaskEmbedding:
    task_id: int
    vector: np.ndarray

    def __post_init__(self):
        v = _frozen(np.asarray(self.vector, dtype=np.float64).ravel())
        if not np.all(np.isfinite(v)):
            raise ValidationError("non-finite-value", "embedding has NaN or Inf", self.task_id)
        object.__setattr__(self, "vector", v)


def embedding_table(embs: Sequence[TaskEmbedding]) -> np.ndarray:
    """Stack embeddings into an ``(M, E)`` table ordered by task id."""
    embs = sorted(embs, key=lambda e: e.task_id)
    if len({e.vector.shape[0] for e in embs}) > 1:
        raise ValidationError("dimension-mismatch", "embeddings have unequal lengths")
    return np.stack([e.vector for e in embs])


def embeddings_from_table(table: np.ndarray) -> list[TaskEmbedding]:
    return [TaskEmbedding(t, row) for t, row in enumerate(np.asarray(table))]


@dataclass(frozen=True)
class ContrastiveBatch:
    task_ids: np.ndarray
    positives: np.ndarray
    negatives: np.ndarray

    def __post_init__(self):
        n = len(self.task_ids)
        if n < 1 or len(self.positives) != n or len(self.negatives) != n:
            raise ValidationError("batch-shape", "task_ids, positives and negatives must share length N >= 1")

    def __len__(self):
        return len(self.task_ids)


@dataclass
class Benchmark:
    """Training collection plus per-task held-out nominal/anomalous sets.

    ``active`` carries ground-truth category sets when known (synthetic
    data); ``names`` maps dense task ids back to external item ids.
    """

    train: TaskCollection
    test_nominal: list
    test_anomalous: list
    names: list = field(default_factory=list)
    active: Optional[list] = None
    label_arity: Optional[int] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.names:
            self.names = [f"task_{t:04d}" for t in range(self.train.num_tasks)]

    @property
    def num_tasks(self) -> int:
        return self.train.num_tasks


@dataclass
class EvalReport:
    per_task_auc: dict
    config: dict
    skipped: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    @property
    def mean_auc(self) -> float:
        vals = list(self.per_task_auc.values())
        return float(np.mean(vals)) if vals else float("nan")

    @property
    def config_digest(self) -> str:
        return json.dumps(self.config, sort_keys=True, separators=(",", ":"))

    def to_dict(self) -> dict:
        return {
            "mean_auc": self.mean_auc,
            "num_tasks": len(self.per_task_auc),
            "per_task_auc": {str(k): v for k, v in sorted(self.per_task_auc.items())},
            "skipped": list(self.skipped),
            "extra": self.extra,
            "config": self.config,
            "config_digest": self.config_digest,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_table(self) -> str:
        lines = [f"{'task':>8}  {'auc':>8}"]
        for k, v in sorted(self.per_task_auc.items()):
            lines.append(f"{k:>8}  {v:8.4f}")
        lines.append(f"{'mean':>8}  {self.mean_auc:8.4f}")
        if self.skipped:
            lines.append(f"skipped tasks: {', '.join(map(str, self.skipped))}")
        return "\n".join(lines)
