"""Conditional likelihood-ratio estimation.

A shared network ``f(x, e_t)`` is trained by logistic regression to tell
samples of task ``t`` (positives) from samples of the pooled population
(negatives).  At the optimum ``f(x, e_t) = log q_t(x) / p(x)``, which is
used directly as a per-task nominality score.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Optional, Sequence

import numpy as np

from .core import (
    ContrastiveBatch,
    TaskCollection,
    TaskEmbedding,
    TrainingError,
    ValidationError,
    embedding_table,
    validate_collection,
)
from .nn import DenseNet, Optimizer, scorer_net

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 256
    lr: float = 1e-3
    optimizer: str = "adam"
    embed_dim: int = 16
    val_fraction: float = 0.1
    seed: int = 0
    hidden: tuple = (32, 32, 16)
    dropout: tuple = (0.5, 0.5, 0.3)
    steps_per_epoch: Optional[int] = None

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        self.dropout = tuple(float(p) for p in self.dropout)
        if len(self.dropout) != len(self.hidden):
            raise ValidationError("config", "dropout needs one rate per hidden layer")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValidationError("config", "epochs must be >= 0 and batch_size >= 1")
        if self.optimizer not in ("adam", "sgd") or not self.lr > 0:
            raise ValidationError("config", "optimizer must be adam or sgd with a positive lr")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValidationError("config", "val_fraction must lie in [0, 1)")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValidationError("config", f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        d["dropout"] = list(self.dropout)
        return d

    def make_optimizer(self) -> Optimizer:
        return Optimizer(self.optimizer, self.lr)


# -- loss -------------------------------------------------------------------


def softplus(z):
    """``log(1 + exp(z))`` without overflow."""
    z = np.asarray(z, dtype=np.float64)
    return np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def logistic_loss(scores_pos, scores_neg) -> float:
    """Mean of ``log(1+e^{-f(x)}) + log(1+e^{f(x~)})`` over the N pairs."""
    sp = np.asarray(scores_pos, dtype=np.float64).ravel()
    sn = np.asarray(scores_neg, dtype=np.float64).ravel()
    if sp.shape != sn.shape:
        raise ValueError("positive and negative score arrays must have equal length")
    return float(np.mean(softplus(-sp) + softplus(sn)))


def logistic_loss_grad(scores_pos, scores_neg):
    n = len(scores_pos)
    return -sigmoid(-scores_pos) / n, sigmoid(scores_neg) / n


# -- sampling ----------------------------------------------------------------


class PopulationSampler:
    """Draws (task, positive, negative) triples from a collection.

    Tasks are drawn with probability ``m_t``; positives uniformly from the
    task; negatives from ``p = sum_t m_t q_t`` by drawing a second task
    ``t' ~ m`` and a uniform sample of it.  Negatives are not excluded from
    the positive's own task.
    """

    def __init__(self, c: TaskCollection, task_subset: Optional[Sequence[int]] = None):
        if c.num_tasks == 0:
            raise ValidationError("empty-collection", "cannot sample from an empty collection")
        self.X = np.concatenate([t.samples for t in c.tasks], axis=0)
        counts = np.array([t.size for t in c.tasks], dtype=np.int64)
        self.counts = counts
        self.starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
        w = c.weights
        self.neg_p = w / w.sum()
        if task_subset is None:
            self.pos_tasks = np.arange(c.num_tasks)
            self.pos_p = self.neg_p
        else:
            self.pos_tasks = np.asarray(task_subset, dtype=np.int64)
            pw = w[self.pos_tasks]
            self.pos_p = pw / pw.sum()
        if np.any(counts[self.pos_tasks] == 0):
            raise ValidationError("empty-task", "a sampled task has no samples")

    def _draw(self, tasks, rng):
        offs = np.floor(rng.random(len(tasks)) * self.counts[tasks]).astype(np.int64)
        return self.X[self.starts[tasks] + offs]

    def sample(self, n: int, rng: np.random.Generator) -> ContrastiveBatch:
        if n < 1:
            raise ValueError("batch size must be >= 1")
        slot = rng.choice(len(self.pos_tasks), size=n, p=self.pos_p)
        t = self.pos_tasks[slot]
        pos = self._draw(t, rng)
        neg_t = rng.choice(len(self.neg_p), size=n, p=self.neg_p)
        neg = self._draw(neg_t, rng)
        return ContrastiveBatch(t, pos, neg)


def sample_batch(c: TaskCollection, n: int, rng: np.random.Generator) -> ContrastiveBatch:
    return PopulationSampler(c).sample(n, rng)


def split_collection(c: TaskCollection, val_fraction: float, rng: np.random.Generator):
    """Per-task seeded train/validation split; weights are kept as given.

    Every task keeps at least one training sample.
    """
    train, val = [], []
    for t in c.tasks:
        perm = rng.permutation(t.size)
        n_val = min(int(math.floor(val_fraction * t.size)), t.size - 1)
        val.append(t.samples[perm[:n_val]])
        train.append(t.samples[perm[n_val:]])
    tr = TaskCollection.from_samples(train, weights=c.weights)
    return tr, val


def validation_batch(val_parts: Sequence[np.ndarray], rng) -> Optional[ContrastiveBatch]:
    """Every held-out sample as a positive, paired with a negative drawn
    uniformly from the held-out pool."""
    parts = [(t, v) for t, v in enumerate(val_parts) if len(v)]
    if not parts:
        return None
    ids = np.concatenate([np.full(len(v), t, dtype=np.int64) for t, v in parts])
    X = np.concatenate([v for _, v in parts], axis=0)
    neg = X[rng.integers(0, len(X), size=len(X))]
    return ContrastiveBatch(ids, X, neg)


# -- generic trainer ---------------------------------------------------------


@dataclass
class TraceRow:
    epoch: int
    train_loss: float
    val_loss: float


def run_training(params: Callable, loss_fn: Callable, draw: Callable, val, cfg: TrainConfig,
                 steps_per_epoch: int, rng: np.random.Generator, probe_size: int = 4096) -> list:
    """Mini-batch loop shared by every model in the package.

    ``loss_fn(batch, training, rng)`` returns ``(loss, grads)`` where
    ``grads`` aligns with ``params()`` (and may be None when not training).
    ``draw(rng, n)`` yields a batch.  Train loss is measured on a fixed
    probe batch with dropout off, so epochs are comparable; epoch 0 is the
    untrained state.  Parameters end at the earliest epoch with the lowest
    validation loss.
    """
    opt = cfg.make_optimizer()
    probe = draw(rng, min(probe_size, max(cfg.batch_size, steps_per_epoch * cfg.batch_size)))
    trace: list = []

    def record(epoch):
        tr = loss_fn(probe, False, None)[0]
        va = loss_fn(val, False, None)[0] if val is not None else tr
        if not (np.isfinite(tr) and np.isfinite(va)):
            raise TrainingError(f"non-finite loss at epoch {epoch} (train={tr}, val={va})")
        trace.append(TraceRow(epoch, float(tr), float(va)))
        return va

    best_val = record(0)
    best_state = [p.copy() for p in params()]
    for epoch in range(1, cfg.epochs + 1):
        for _ in range(steps_per_epoch):
            loss, grads = loss_fn(draw(rng, cfg.batch_size), True, rng)
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite training loss during epoch {epoch}")
            opt.step(params(), grads)
        va = record(epoch)
        log.debug("epoch %d train %.5f val %.5f", epoch, trace[-1].train_loss, va)
        if va < best_val:
            best_val = va
            best_state = [p.copy() for p in params()]
    for p, s in zip(params(), best_state):
        p[...] = s
    return trace


def fit_contrastive(model, draw: Callable, val: Optional[ContrastiveBatch], cfg: TrainConfig,
                    steps_per_epoch: int, rng: np.random.Generator) -> list:
    """Minimise the logistic loss of ``model``; see :func:`run_training`.

    ``model`` exposes ``params()``, ``logits(task_ids, X, training, rng)``
    returning ``(f, cache)`` and ``grads(cache, df)``.
    """

    def loss_fn(b, training, r):
        n = len(b)
        f, cache = model.logits(np.concatenate([b.task_ids, b.task_ids]),
                                np.concatenate([b.positives, b.negatives]), training, r)
        loss = logistic_loss(f[:n], f[n:])
        if not training:
            return loss, None
        if not np.all(np.isfinite(f)):
            raise TrainingError("non-finite scores during training")
        gp, gn = logistic_loss_grad(f[:n], f[n:])
        return loss, model.grads(cache, np.concatenate([gp, gn]))

    return run_training(model.params, loss_fn, draw, val, cfg, steps_per_epoch, rng)


def write_trace(path, trace: Sequence[TraceRow]):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_loss", "val_loss"])
        for r in trace:
            w.writerow([r.epoch, repr(float(r.train_loss)), repr(float(r.val_loss))])


# -- models ------------------------------------------------------------------


class RatioModel:
    """Shared scorer over ``concat(x, e_t)`` plus a trainable embedding table."""

    def __init__(self, net: DenseNet, embeddings: np.ndarray):
        embeddings = np.array(embeddings, dtype=np.float64)
        if embeddings.ndim != 2:
            raise ValueError("embedding table must be 2-D (M, E)")
        self.net = net
        self.embeddings = embeddings
        self.feature_dim = net.in_dim - embeddings.shape[1]
        if self.feature_dim <= 0:
            raise ValidationError("dimension-mismatch", "network input narrower than embedding")

    @property
    def num_tasks(self):
        return self.embeddings.shape[0]

    @property
    def embed_dim(self):
        return self.embeddings.shape[1]

    def params(self):
        return self.net.params() + [self.embeddings]

    def logits(self, task_ids, X, training, rng):
        inp = np.concatenate([X, self.embeddings[task_ids]], axis=1)
        out, tape = self.net.forward(inp, training, rng)
        return out[:, 0], (tape, task_ids)

    def grads(self, cache, df):
        tape, task_ids = cache
        g, gin = self.net.backward(tape, df.reshape(-1, 1))
        gE = np.zeros_like(self.embeddings)
        np.add.at(gE, task_ids, gin[:, self.feature_dim:])
        return g + [gE]

    def score_with_embedding(self, emb, X) -> np.ndarray:
        """Score rows of ``X`` under an arbitrary embedding vector."""
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        e = np.broadcast_to(np.asarray(emb, dtype=np.float64), (len(X), self.embed_dim))
        return self.net(np.concatenate([X, e], axis=1))[:, 0]

    def score(self, task_id: int, x):
        """``f(x, e_t)``; larger means more typical for task ``task_id``."""
        if not 0 <= task_id < self.num_tasks:
            raise KeyError(f"unknown task id {task_id}")
        x = np.asarray(x, dtype=np.float64)
        s = self.score_with_embedding(self.embeddings[task_id], x)
        return float(s[0]) if x.ndim == 1 else s


def _resolve_init(init, m: int) -> Optional[np.ndarray]:
    if init is None:
        return None
    if isinstance(init, np.ndarray):
        table = np.array(init, dtype=np.float64)
    else:
        table = embedding_table(list(init))
    if table.ndim != 2 or table.shape[0] != m:
        raise ValidationError("dimension-mismatch", f"init table must have {m} rows, got shape {table.shape}")
    return table


def estimate_clr(c: TaskCollection, init=None, cfg: Optional[TrainConfig] = None,
                 rng: Optional[np.random.Generator] = None):
    """Jointly train the shared scorer and the task embeddings.

    ``init`` is an ``(M, E)`` table (or list of :class:`TaskEmbedding`);
    when omitted the table is drawn i.i.d. standard normal with
    ``cfg.embed_dim`` columns.  Returns ``(model, trace)`` with the model
    restored to its best validation epoch.
    """
    cfg = cfg or TrainConfig()
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    validate_collection(c)
    table = _resolve_init(init, c.num_tasks)
    if table is None:
        table = rng.standard_normal((c.num_tasks, cfg.embed_dim))
    net = scorer_net(c.feature_dim + table.shape[1], rng, hidden=cfg.hidden, dropout=cfg.dropout)
    model = RatioModel(net, table)
    train, val_parts = split_collection(c, cfg.val_fraction, rng)
    sampler = PopulationSampler(train)
    val = validation_batch(val_parts, rng)
    steps = cfg.steps_per_epoch or max(1, math.ceil(len(sampler.X) / cfg.batch_size))
    trace = fit_contrastive(model, lambda r, n: sampler.sample(n, r), val, cfg, steps, rng)
    return model, trace


class SingleTaskScorer:
    """Unconditional ratio estimator ``f(x)`` for one (q, p) pair."""

    def __init__(self, net: DenseNet):
        self.net = net

    def params(self):
        return self.net.params()

    def logits(self, task_ids, X, training, rng):
        out, tape = self.net.forward(X, training, rng)
        return out[:, 0], tape

    def grads(self, tape, df):
        return self.net.backward(tape, df.reshape(-1, 1))[0]

    def __call__(self, x):
        """Score one point or many.  For scalar features a 1-D array is a
        list of points."""
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 0 or (x.ndim == 1 and self.net.in_dim > 1)
        rows = x.reshape(-1, self.net.in_dim)
        s = self.net(rows)[:, 0]
        return float(s[0]) if single else s


def _as_rows(a):
    a = np.asarray(a, dtype=np.float64)
    return a.reshape(-1, 1) if a.ndim == 1 else a


def score_single_task(positives, negatives, cfg: Optional[TrainConfig] = None,
                      rng: Optional[np.random.Generator] = None):
    """Fit ``f ~ log q/p`` from samples of q (positives) and p (negatives).

    Returns ``(scorer, trace)``.  1-D sample arrays are read as scalar
    features.
    """
    cfg = cfg or TrainConfig()
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    P, N = _as_rows(positives), _as_rows(negatives)
    if len(P) == 0 or len(N) == 0:
        raise ValidationError("empty-task", "positives and negatives must be non-empty")
    if P.shape[1] != N.shape[1]:
        raise ValidationError("dimension-mismatch", "positives and negatives differ in dimension")

    def split(A):
        perm = rng.permutation(len(A))
        k = min(int(math.floor(cfg.val_fraction * len(A))), len(A) - 1)
        return A[perm[k:]], A[perm[:k]]

    P_tr, P_va = split(P)
    N_tr, N_va = split(N)
    val = None
    if len(P_va) and len(N_va):
        k = min(len(P_va), len(N_va))
        val = ContrastiveBatch(np.zeros(k, dtype=np.int64), P_va[:k], N_va[:k])

    def draw(r, n):
        return ContrastiveBatch(np.zeros(n, dtype=np.int64),
                                P_tr[r.integers(0, len(P_tr), n)], N_tr[r.integers(0, len(N_tr), n)])

    net = scorer_net(P.shape[1], rng, hidden=cfg.hidden, dropout=cfg.dropout)
    scorer = SingleTaskScorer(net)
    steps = cfg.steps_per_epoch or max(1, math.ceil(max(len(P_tr), len(N_tr)) / cfg.batch_size))
    trace = fit_contrastive(scorer, draw, val, cfg, steps, rng)
    return scorer, trace


def ratio_model_to_arrays(model: RatioModel) -> tuple[dict, dict]:
    from .nn import net_to_arrays

    arrays, net_meta = net_to_arrays(model.net, "net")
    arrays["embeddings"] = model.embeddings
    return arrays, {"kind": "clr", "net": net_meta, "feature_dim": model.feature_dim}


def ratio_model_from_arrays(arrays, meta) -> RatioModel:
    from .nn import net_from_arrays

    return RatioModel(net_from_arrays(arrays, "net", meta["net"]), arrays["embeddings"])


def embeddings_of(model: RatioModel) -> list[TaskEmbedding]:
    return [TaskEmbedding(t, row) for t, row in enumerate(model.embeddings)]
