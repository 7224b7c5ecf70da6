"""Metrics, brute-force oracles and report emission."""

from __future__ import annotations

import itertools
import json
import math
import os
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.stats import rankdata

from .core import Benchmark, CADError, EvalReport, ValidationError


class UndefinedCorrelationError(CADError, ValueError):
    pass


def auc(scores_nominal, scores_anomalous) -> float:
    """P(nominal score > anomalous score), ties counted one half.

    Computed from mid-rank sums, O(n log n).
    """
    a = np.asarray(scores_nominal, dtype=np.float64).ravel()
    b = np.asarray(scores_anomalous, dtype=np.float64).ravel()
    if len(a) == 0 or len(b) == 0:
        raise ValidationError("empty-side", "AUC needs at least one nominal and one anomalous score")
    ranks = rankdata(np.concatenate([a, b]), method="average")
    u = ranks[: len(a)].sum() - len(a) * (len(a) + 1) / 2.0
    return float(u / (len(a) * len(b)))


def auc_bruteforce(scores_nominal, scores_anomalous) -> float:
    """Quadratic pair-counting reference for :func:`auc`."""
    a = np.asarray(scores_nominal, dtype=np.float64).ravel()
    b = np.asarray(scores_anomalous, dtype=np.float64).ravel()
    if len(a) == 0 or len(b) == 0:
        raise ValidationError("empty-side", "AUC needs at least one nominal and one anomalous score")
    gt = 0
    eq = 0
    for x in a:
        for y in b:
            if x > y:
                gt += 1
            elif x == y:
                eq += 1
    return float((gt + 0.5 * eq) / (len(a) * len(b)))


# -- base-distribution oracle ---------------------------------------------------


def kl_divergence_discrete(q, p) -> float:
    q = np.asarray(q, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    if q.shape != p.shape:
        raise ValidationError("shape", "q and p must have the same length")
    on = q > 0
    if np.any(p[on] <= 0):
        raise ValidationError("support", "p must be positive wherever q is")
    return float(np.sum(q[on] * np.log(q[on] / p[on])))


def simplex_grid(k: int, resolution: int) -> np.ndarray:
    """All points of the (k-1)-simplex with coordinates in multiples of 1/resolution."""
    rows = []
    for cut in itertools.combinations(range(resolution + k - 1), k - 1):
        edges = (-1,) + cut + (resolution + k - 1,)
        rows.append([edges[i + 1] - edges[i] - 1 for i in range(k)])
    return np.array(rows, dtype=np.float64) / resolution


def expected_kl(qs, m, P) -> np.ndarray:
    """``sum_t m_t KL(q_t || p)`` for every row ``p`` of ``P`` (inf off-support)."""
    P = np.atleast_2d(P)
    out = np.zeros(len(P))
    for q, w in zip(qs, m):
        if w == 0:
            continue
        on = q > 0
        with np.errstate(divide="ignore"):
            logp = np.log(P[:, on])
        out += w * np.sum(q[on] * (np.log(q[on]) - logp), axis=1)
    return out


@dataclass
class BaseOptimalityReport:
    j_mixture: float
    j_grid_min: float
    grid_argmin: np.ndarray
    mixture: np.ndarray
    l1_to_mixture: float
    grid_points: int
    passed: bool


MAX_GRID_POINTS = 5_000_000


def verify_base_optimality(qs, m, resolution: int = 200, tol: float = 1e-6) -> BaseOptimalityReport:
    """Brute-force check that the weighted mixture minimises the expected KL.

    The objective is evaluated on every simplex grid point at the given
    resolution and compared with its value at ``sum_t m_t q_t``.
    """
    qs = [np.asarray(q, dtype=np.float64) for q in qs]
    m = np.asarray(m, dtype=np.float64)
    if len(qs) != len(m):
        raise ValidationError("shape", "one weight per distribution")
    if abs(m.sum() - 1.0) > 1e-9 or np.any(m < 0):
        raise ValidationError("weight-sum", "weights must be non-negative and sum to 1")
    k = len(qs[0])
    if k > 5:
        raise ValidationError("grid-size", "alphabet larger than 5 is not brute-forceable")
    npts = math.comb(resolution + k - 1, k - 1)
    if npts > MAX_GRID_POINTS:
        raise ValidationError("grid-size", f"{npts} grid points exceed the limit of {MAX_GRID_POINTS}")
    mix = sum(w * q for w, q in zip(m, qs))
    G = simplex_grid(k, resolution)
    J = expected_kl(qs, m, G)
    best = int(np.argmin(J))
    jm = float(expected_kl(qs, m, mix)[0])
    return BaseOptimalityReport(
        j_mixture=jm,
        j_grid_min=float(J[best]),
        grid_argmin=G[best],
        mixture=mix,
        l1_to_mixture=float(np.abs(G[best] - mix).sum()),
        grid_points=npts,
        passed=bool(jm <= J[best] + tol),
    )


# -- ratio recovery oracle ------------------------------------------------------


def gaussian_log_ratio(x, q_params, p_params):
    """``log N(x; mq, sq) - log N(x; mp, sp)`` for 1-D Gaussians given as (mean, std)."""
    x = np.asarray(x, dtype=np.float64)
    (mq, sq), (mp, sp) = q_params, p_params
    return (np.log(sp / sq) - 0.5 * ((x - mq) / sq) ** 2 + 0.5 * ((x - mp) / sp) ** 2)


def ratio_grid(lo=-2.0, hi=2.0, step=0.1) -> np.ndarray:
    n = int(round((hi - lo) / step))
    return lo + step * np.arange(n + 1)


def ratio_recovery_error(scorer: Callable, q_params, p_params, grid=None) -> float:
    grid = ratio_grid() if grid is None else np.asarray(grid, dtype=np.float64)
    pred = np.asarray(scorer(grid), dtype=np.float64).ravel()
    return float(np.max(np.abs(pred - gaussian_log_ratio(grid, q_params, p_params))))


# -- similarity ---------------------------------------------------------------


def _upper(a):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 1:
        return a
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValidationError("shape", "expected a square matrix or a flat vector")
    return a[np.triu_indices(a.shape[0], k=1)]


def similarity_rank_correlation(learned_sim, truth_overlap) -> float:
    """Spearman rho over the strict upper triangles (mid-ranks for ties)."""
    x, y = _upper(learned_sim), _upper(truth_overlap)
    if x.shape != y.shape:
        raise ValidationError("shape", "matrices must have the same shape")
    if len(x) < 2 or np.all(x == x[0]) or np.all(y == y[0]):
        raise UndefinedCorrelationError("Spearman correlation is undefined for constant input")
    rx, ry = rankdata(x), rankdata(y)
    return float(np.corrcoef(rx, ry)[0, 1])


# -- task-level evaluation -----------------------------------------------------


def evaluate_scorer(score_fn: Callable, benchmark: Benchmark, config: dict,
                    tasks: Optional[Sequence[int]] = None) -> EvalReport:
    """AUC per task, ``score_fn(task_id, X) -> scores``; higher = more nominal.

    Tasks lacking either nominal or anomalous test data are listed as
    skipped rather than scored.
    """
    per, skipped = {}, []
    for t in (range(benchmark.num_tasks) if tasks is None else tasks):
        nom, ano = benchmark.test_nominal[t], benchmark.test_anomalous[t]
        if len(nom) == 0 or len(ano) == 0:
            skipped.append(t)
            continue
        per[t] = auc(score_fn(t, nom), score_fn(t, ano))
    return EvalReport(per, dict(config), skipped)


def evaluate_generalization(pre_model, ratio_model, test_benchmark: Benchmark, config: dict,
                            projection: Optional[np.ndarray] = None) -> EvalReport:
    """Score unseen tasks with frozen models.

    Each unseen task is embedded by the frozen pre-embedding model from its
    own training samples; the frozen ratio model then scores its test set
    under that embedding.  Nothing is retrained.
    """
    from .embed import learned_embedding

    embs = []
    for t in test_benchmark.train.tasks:
        e = learned_embedding(pre_model, t).vector
        if projection is not None:
            e = e @ projection
        if e.shape[0] != ratio_model.embed_dim:
            raise ValidationError("dimension-mismatch",
                                  f"embedding width {e.shape[0]} != model width {ratio_model.embed_dim}", t.task_id)
        embs.append(e)
    return evaluate_scorer(lambda t, X: ratio_model.score_with_embedding(embs[t], X), test_benchmark, config)


def report_basename(experiment: str, seed: int) -> str:
    return f"report_{experiment}_{seed}"


def write_report(report: EvalReport, out_dir, experiment: str, seed: int) -> tuple[str, str]:
    os.makedirs(out_dir, exist_ok=True)
    base = os.path.join(out_dir, report_basename(experiment, seed))
    with open(base + ".json", "w") as fh:
        fh.write(report.to_json() + "\n")
    with open(base + ".txt", "w") as fh:
        fh.write(report.to_table() + "\n")
    return base + ".json", base + ".txt"


def write_matrix_csv(path, M, labels: Optional[Sequence[str]] = None):
    M = np.asarray(M)
    labels = list(labels) if labels is not None else [str(i) for i in range(len(M))]
    with open(path, "w") as fh:
        fh.write("task," + ",".join(labels) + "\n")
        for lab, row in zip(labels, M):
            fh.write(lab + "," + ",".join(repr(float(v)) for v in row) + "\n")


# -- numerical oracles used by the verify command ------------------------------


def net_gradient_error(net, X, upstream, h: float = 1e-5) -> float:
    """Max relative error between ``net.backward`` and central differences.

    Checks every parameter entry and every input entry of the scalar
    ``sum(upstream * net(X))``.
    """
    def value():
        return float(np.sum(upstream * net.forward(X)[0]))

    _, tape = net.forward(X)
    grads, gin = net.backward(tape, upstream)
    worst = 0.0
    for p, g in list(zip(net.params(), grads)) + [(X, gin)]:
        flat, gf = p.reshape(-1), np.asarray(g).reshape(-1)
        for k in range(flat.size):
            old = flat[k]
            flat[k] = old + h
            up = value()
            flat[k] = old - h
            down = value()
            flat[k] = old
            num = (up - down) / (2 * h)
            worst = max(worst, abs(num - gf[k]) / max(1e-6, abs(num), abs(gf[k])))
    return worst


def random_gradcheck_nets(n_nets: int, rng) -> float:
    """Worst gradient error over random nets of 1-3 layers and <= 16 units."""
    from .nn import DenseNet

    worst = 0.0
    for _ in range(n_nets):
        depth = int(rng.integers(1, 4))
        sizes = [int(s) for s in rng.integers(1, 17, size=depth + 1)]
        acts = [str(a) for a in rng.choice(["relu", "tanh", "identity"], size=depth)]
        net = DenseNet.build(sizes, acts, rng)
        for l in net.layers:
            l.bias[...] = rng.normal(scale=0.5, size=l.bias.shape)
        X = rng.normal(size=(3, sizes[0]))
        up = rng.normal(size=(3, sizes[-1]))
        worst = max(worst, net_gradient_error(net, X, up))
    return worst


def flow_roundtrip_error(flow, task_ids, X) -> float:
    z, _ = flow.inverse(task_ids, X)
    a = float(np.max(np.abs(flow.forward(task_ids, z) - X)))
    b = float(np.max(np.abs(flow.inverse(task_ids, flow.forward(task_ids, z))[0] - z)))
    return max(a, b)


def flow_masking_violation(flow, task_id, x, h: float = 1e-6) -> float:
    """Largest |du_i/dx_j| with j > i over every block, by central differences."""
    x = np.asarray(x, dtype=np.float64)
    d = x.shape[0]
    worst = 0.0
    for i in range(len(flow.blocks)):
        for j in range(d):
            e = np.zeros(d)
            e[j] = h
            col = (flow.block_inverse(i, task_id, x + e) - flow.block_inverse(i, task_id, x - e)) / (2 * h)
            if j > 0:
                worst = max(worst, float(np.max(np.abs(col[:j]))))
    return worst


def flow_density_mass(flow, task_id, lo=-12.0, hi=12.0, n=4001) -> float:
    """Riemann sum of ``exp(logpdf)`` over a 1-D or 2-D grid."""
    g = np.linspace(lo, hi, n)
    step = g[1] - g[0]
    if flow.d == 1:
        return float(np.exp(flow.logpdf(task_id, g[:, None])).sum() * step)
    if flow.d == 2:
        A, B = np.meshgrid(g, g, indexing="ij")
        P = np.stack([A.ravel(), B.ravel()], axis=1)
        return float(np.exp(flow.logpdf(task_id, P)).sum() * step * step)
    raise ValidationError("dimension", "density mass check supports d <= 2 only")
