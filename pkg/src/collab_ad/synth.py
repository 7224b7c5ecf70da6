"""Synthetic multi-task benchmark built from labelled Gaussian blobs.

There are L categories, each an isotropic Gaussian blob.  A task is a set
of k active categories; all C(L, k) such sets are enumerated.  Every
training sample is exposed to exactly one task chosen uniformly among the
tasks that contain its category.  At test time a task's nominal data are
the held-out samples of its active categories and everything else is
anomalous.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .core import Benchmark, TaskCollection, ValidationError


@dataclass
class SynthConfig:
    L: int = 10
    d: int = 10
    k: int = 1
    n_per_category: int = 1000
    sigma: float = 1.0
    center_scale: float = 3.0
    test_fraction: float = 0.2
    seed: int = 0
    centers: Optional[list] = None

    def validate(self):
        if self.L < 1 or not 1 <= self.k <= self.L:
            raise ValidationError("config", f"need 1 <= k <= L, got k={self.k}, L={self.L}")
        if self.n_per_category < 2:
            raise ValidationError("config", "n_per_category must be at least 2")
        if not 0.0 < self.test_fraction < 1.0:
            raise ValidationError("config", "test_fraction must lie in (0, 1)")
        if self.sigma <= 0:
            raise ValidationError("config", "sigma must be positive")
        C = self.center_matrix()
        if C.shape != (self.L, self.d):
            raise ValidationError("config", f"centers must have shape ({self.L}, {self.d})")
        if len({tuple(r) for r in C}) != self.L:
            raise ValidationError("config", "blob centers must be pairwise distinct")

    def center_matrix(self) -> np.ndarray:
        if self.centers is not None:
            return np.asarray(self.centers, dtype=np.float64)
        if self.d < self.L:
            raise ValidationError("config", "default one-hot centers need d >= L; pass centers explicitly")
        C = np.zeros((self.L, self.d))
        C[np.arange(self.L), np.arange(self.L)] = self.center_scale
        return C

    def to_dict(self):
        return asdict(self)


@dataclass
class SynthBenchmark(Benchmark):
    config: Optional[SynthConfig] = None
    test_X: Optional[np.ndarray] = None
    test_labels: Optional[np.ndarray] = None


def task_count(L: int, k: int) -> int:
    return math.comb(L, k)


def generate(cfg: SynthConfig) -> SynthBenchmark:
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    C = cfg.center_matrix()
    tasks = list(itertools.combinations(range(cfg.L), cfg.k))
    tasks_of = [[t for t, act in enumerate(tasks) if c in act] for c in range(cfg.L)]
    if any(len(x) == 0 for x in tasks_of):
        raise ValidationError("config", "a category belongs to no task")

    train_X, train_lab, test_X, test_lab = [], [], [], []
    n_test = max(1, int(round(cfg.test_fraction * cfg.n_per_category)))
    for c in range(cfg.L):
        pts = C[c] + cfg.sigma * rng.standard_normal((cfg.n_per_category, cfg.d))
        test_X.append(pts[:n_test])
        test_lab.append(np.full(n_test, c))
        train_X.append(pts[n_test:])
        train_lab.append(np.full(cfg.n_per_category - n_test, c))
    train_X = np.concatenate(train_X)
    train_lab = np.concatenate(train_lab)
    test_X = np.concatenate(test_X)
    test_lab = np.concatenate(test_lab)

    owner = np.empty(len(train_X), dtype=np.int64)
    for i, c in enumerate(train_lab):
        cands = tasks_of[c]
        owner[i] = cands[rng.integers(len(cands))]

    samples, labels = [], []
    for t in range(len(tasks)):
        idx = np.flatnonzero(owner == t)
        if len(idx) == 0:
            raise ValidationError(
                "empty-task", f"no training sample was exposed to task {t}; increase n_per_category", t)
        samples.append(train_X[idx])
        labels.append(train_lab[idx])
    train = TaskCollection.from_samples(samples, labels=labels)

    nominal, anomalous = [], []
    for act in tasks:
        is_nom = np.isin(test_lab, act)
        nominal.append(test_X[is_nom])
        anomalous.append(test_X[~is_nom])

    return SynthBenchmark(
        train=train,
        test_nominal=nominal,
        test_anomalous=anomalous,
        active=[tuple(a) for a in tasks],
        label_arity=cfg.L,
        meta={"kind": "synth", "synth": cfg.to_dict()},
        config=cfg,
        test_X=test_X,
        test_labels=test_lab,
    )


def ground_truth_overlap(benchmark: Benchmark, i: int, j: int) -> int:
    if benchmark.active is None:
        raise ValidationError("no-ground-truth", "benchmark carries no active category sets")
    return len(set(benchmark.active[i]) & set(benchmark.active[j]))


def overlap_matrix(active_sets) -> np.ndarray:
    S = [set(a) for a in active_sets]
    return np.array([[len(a & b) for b in S] for a in S], dtype=np.float64)


def restricted_benchmark(base: SynthBenchmark, k: int, seed: Optional[int] = None) -> SynthBenchmark:
    """Benchmark with a different k over the same blobs (new draw)."""
    cfg = SynthConfig(**{**base.config.to_dict(), "k": k,
                         "seed": base.config.seed + 1 if seed is None else seed})
    return generate(cfg)
