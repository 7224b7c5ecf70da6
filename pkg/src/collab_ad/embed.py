"""Task-embedding initialisers.

The learned initialiser trains a head-per-task ratio model on a few seed
tasks and describes every task by the mean response of those heads on
its samples.  Random, label, histogram and GMM pseudo-label initialisers
are provided as baselines.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.special import logsumexp

from .clr import PopulationSampler, TrainConfig, fit_contrastive, split_collection, validation_batch
from .core import TaskCollection, TaskDataset, TaskEmbedding, ValidationError, validate_collection
from .nn import DenseNet, net_from_arrays, net_to_arrays, scorer_net


def select_seed_tasks(c: TaskCollection, m0: int, rng: np.random.Generator) -> list[int]:
    if not 1 <= m0 <= c.num_tasks:
        raise ValidationError("seed-count", f"m0={m0} must lie in [1, {c.num_tasks}]")
    return sorted(int(t) for t in rng.choice(c.num_tasks, size=m0, replace=False))


class PreEmbeddingModel:
    """Shared trunk with one linear output head per seed task.

    Head ``s`` estimates ``log q_s(x) / p(x)`` with ``p`` the full
    population.  Only forward passes are needed once trained.
    """

    def __init__(self, net: DenseNet, seeds: Sequence[int]):
        self.net = net
        self.seeds = [int(s) for s in seeds]
        if net.out_dim != len(self.seeds):
            raise ValidationError("dimension-mismatch", "need exactly one head per seed task")

    @property
    def m0(self):
        return len(self.seeds)

    def params(self):
        return self.net.params()

    def logits(self, head_ids, X, training, rng):
        out, tape = self.net.forward(X, training, rng)
        rows = np.arange(len(X))
        return out[rows, head_ids], (tape, head_ids, out.shape)

    def grads(self, cache, df):
        tape, head_ids, shape = cache
        up = np.zeros(shape)
        up[np.arange(shape[0]), head_ids] = df
        return self.net.backward(tape, up)[0]

    def responses(self, X) -> np.ndarray:
        """Basis responses ``r(x)``, one row of length M0 per sample."""
        return self.net(np.atleast_2d(np.asarray(X, dtype=np.float64)))

    def to_arrays(self):
        arrays, meta = net_to_arrays(self.net, "pre")
        return arrays, {"kind": "pre_embedding", "net": meta, "seeds": self.seeds}

    @classmethod
    def from_arrays(cls, arrays, meta):
        return cls(net_from_arrays(arrays, "pre", meta["net"]), meta["seeds"])


def train_pre_embedding(c: TaskCollection, seeds: Sequence[int], cfg: Optional[TrainConfig] = None,
                        rng: Optional[np.random.Generator] = None):
    """Train the seed-task heads.  Returns ``(model, trace)``.

    Positives come from seed tasks only; negatives from the whole
    population.  The per-seed embeddings a conditional run would produce
    are not part of this model and are never reused.
    """
    cfg = cfg or TrainConfig()
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    validate_collection(c)
    seeds = [int(s) for s in seeds]
    if not seeds or len(set(seeds)) != len(seeds) or not all(0 <= s < c.num_tasks for s in seeds):
        raise ValidationError("seed-tasks", f"invalid seed list {seeds}")
    net = scorer_net(c.feature_dim, rng, out_dim=len(seeds), hidden=cfg.hidden, dropout=cfg.dropout)
    model = PreEmbeddingModel(net, seeds)
    head_of = {s: h for h, s in enumerate(seeds)}

    train, val_parts = split_collection(c, cfg.val_fraction, rng)
    sampler = PopulationSampler(train, task_subset=seeds)

    def draw(r, n):
        b = sampler.sample(n, r)
        return type(b)(np.array([head_of[t] for t in b.task_ids]), b.positives, b.negatives)

    val = _seed_validation(val_parts, seeds, rng)
    n_seed = sum(train.tasks[s].size for s in seeds)
    steps = cfg.steps_per_epoch or max(1, math.ceil(n_seed / cfg.batch_size))
    trace = fit_contrastive(model, draw, val, cfg, steps, rng)
    return model, trace


def _seed_validation(val_parts, seeds, rng):
    full = validation_batch(val_parts, rng)
    if full is None:
        return None
    pool = full.positives
    pos = [(h, val_parts[s]) for h, s in enumerate(seeds) if len(val_parts[s])]
    if not pos:
        return None
    ids = np.concatenate([np.full(len(v), h, dtype=np.int64) for h, v in pos])
    X = np.concatenate([v for _, v in pos])
    neg = pool[rng.integers(0, len(pool), size=len(X))]
    return type(full)(ids, X, neg)


def learned_embedding(model: PreEmbeddingModel, task: TaskDataset) -> TaskEmbedding:
    """Mean basis response over the task's samples (forward passes only)."""
    if task.size == 0:
        raise ValidationError("empty-task", "cannot embed a task without samples", task.task_id)
    return TaskEmbedding(task.task_id, model.responses(task.samples).mean(axis=0))


def learned_embeddings(model: PreEmbeddingModel, c: TaskCollection) -> np.ndarray:
    return np.stack([learned_embedding(model, t).vector for t in c.tasks])


def histogram_embedding(task: TaskDataset, label_arity: int) -> TaskEmbedding:
    if task.labels is None:
        raise ValidationError("missing-labels", "histogram embedding needs per-sample labels", task.task_id)
    lab = task.labels
    if len(lab) == 0 or lab.min() < 0 or lab.max() >= label_arity:
        raise ValidationError("label-range", f"labels must lie in [0, {label_arity})", task.task_id)
    counts = np.bincount(lab, minlength=label_arity).astype(np.float64)
    return TaskEmbedding(task.task_id, counts / counts.sum())


def label_embedding(active_categories, label_arity: int, task_id: int = 0) -> TaskEmbedding:
    active = sorted(set(int(a) for a in active_categories))
    if not active:
        raise ValidationError("empty-active-set", "a task needs at least one active category", task_id)
    if active[0] < 0 or active[-1] >= label_arity:
        raise ValidationError("label-range", f"categories must lie in [0, {label_arity})", task_id)
    v = np.zeros(label_arity)
    v[active] = 1.0
    return TaskEmbedding(task_id, v)


def random_embedding(m: int, e_dim: int, rng: np.random.Generator) -> np.ndarray:
    return rng.standard_normal((m, e_dim))


# -- diagonal Gaussian mixture ------------------------------------------------

VAR_FLOOR = 1e-6


@dataclass
class DiagonalGMM:
    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    log_likelihoods: list = field(default_factory=list)

    def _log_joint(self, X):
        diff = X[:, None, :] - self.means[None, :, :]
        ll = -0.5 * (np.log(2 * np.pi * self.variances)[None] + diff ** 2 / self.variances[None]).sum(-1)
        return ll + np.log(self.weights)[None]

    def responsibilities(self, X):
        lj = self._log_joint(np.atleast_2d(X))
        return np.exp(lj - logsumexp(lj, axis=1, keepdims=True))

    def mean_log_likelihood(self, X):
        return float(logsumexp(self._log_joint(np.atleast_2d(X)), axis=1).mean())


def _kmeanspp(X, k, rng):
    centers = [X[rng.integers(len(X))]]
    d2 = ((X - centers[0]) ** 2).sum(1)
    for _ in range(1, k):
        total = d2.sum()
        idx = rng.integers(len(X)) if total <= 0 else rng.choice(len(X), p=d2 / total)
        centers.append(X[idx])
        d2 = np.minimum(d2, ((X - X[idx]) ** 2).sum(1))
    return np.array(centers)


def fit_diagonal_gmm(X, n_components: int, rng: np.random.Generator, tol=1e-6, max_iter=200) -> DiagonalGMM:
    """EM for a diagonal-covariance mixture with k-means++ seeding.

    Stops when the mean log-likelihood changes by less than ``tol``.
    Variances are floored at ``VAR_FLOOR`` so identical points never break
    the fit.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    n, d = X.shape
    if n_components < 1 or n < n_components:
        raise ValidationError("gmm-size", f"need 1 <= components <= {n}, got {n_components}")
    means = _kmeanspp(X, n_components, rng)
    # hard assignment to seeds for the initial variances and weights
    assign = ((X[:, None, :] - means[None]) ** 2).sum(-1).argmin(1)
    variances = np.empty((n_components, d))
    weights = np.empty(n_components)
    gvar = np.maximum(X.var(0), VAR_FLOOR)
    for j in range(n_components):
        pts = X[assign == j]
        weights[j] = max(len(pts), 1)
        variances[j] = np.maximum(pts.var(0), VAR_FLOOR) if len(pts) > 1 else gvar
    gmm = DiagonalGMM(weights / weights.sum(), means, variances)
    prev = gmm.mean_log_likelihood(X)
    gmm.log_likelihoods.append(prev)
    for _ in range(max_iter):
        R = gmm.responsibilities(X)
        nk = R.sum(0) + 1e-300
        gmm.weights = nk / n
        gmm.means = (R.T @ X) / nk[:, None]
        sq = (R.T @ (X ** 2)) / nk[:, None] - gmm.means ** 2
        gmm.variances = np.maximum(sq, VAR_FLOOR)
        cur = gmm.mean_log_likelihood(X)
        gmm.log_likelihoods.append(cur)
        if abs(cur - prev) < tol:
            break
        prev = cur
    return gmm


def pseudo_label_embedding(c: TaskCollection, n_components: int, rng: np.random.Generator,
                           tol=1e-6, max_iter=200):
    """Each task's mean GMM responsibility vector.  Returns ``(table, gmm)``."""
    if n_components < 1:
        raise ValidationError("gmm-size", "need at least one component")
    _, X = c.population
    gmm = fit_diagonal_gmm(X, n_components, rng, tol=tol, max_iter=max_iter)
    table = np.stack([gmm.responsibilities(t.samples).mean(0) for t in c.tasks])
    return table, gmm


# -- similarity & projection -------------------------------------------------


def similarity_matrix(embs) -> np.ndarray:
    """Pairwise cosine similarity of embedding vectors (or table rows)."""
    if isinstance(embs, np.ndarray):
        V = np.atleast_2d(embs).astype(np.float64)
    else:
        V = np.stack([e.vector if isinstance(e, TaskEmbedding) else np.asarray(e, dtype=np.float64)
                      for e in embs])
    norms = np.linalg.norm(V, axis=1)
    if np.any(norms == 0):
        bad = int(np.flatnonzero(norms == 0)[0])
        raise ValidationError("zero-norm", "cosine similarity undefined for a zero vector", bad)
    U = V / norms[:, None]
    S = np.clip(U @ U.T, -1.0, 1.0)
    S = 0.5 * (S + S.T)
    np.fill_diagonal(S, 1.0)
    return S


def projection_map(m0: int, e_dim: int, rng: np.random.Generator) -> np.ndarray:
    """Fixed random linear map from M0 responses to an E-wide embedding."""
    return rng.standard_normal((m0, e_dim)) / np.sqrt(m0)


def fit_to_width(table: np.ndarray, e_dim: Optional[int], rng: np.random.Generator):
    """Return ``(table, map)``; ``map`` is None when widths already agree."""
    if e_dim is None or e_dim == table.shape[1]:
        return table, None
    P = projection_map(table.shape[1], e_dim, rng)
    return table @ P, P
