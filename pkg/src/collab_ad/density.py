"""Conditional density baselines: diagonal Gaussian and an affine MAF.

Both are trained by maximum likelihood and score a point by its
log-density under the task's model.
"""

from __future__ import annotations

import math
from typing import Optional, Sequence

import numpy as np

from .clr import TrainConfig, run_training
from .core import TaskCollection, ValidationError, validate_collection
from .nn import DenseNet, net_from_arrays, net_to_arrays

LOG_2PI = math.log(2.0 * math.pi)
LOGVAR_FLOOR = math.log(1e-6)
ALPHA_CLAMP = 7.0


# -- conditional Gaussian ----------------------------------------------------


class ConditionalGaussian:
    """MLP from a task embedding to a diagonal Gaussian (mean, log-variance)."""

    def __init__(self, net: DenseNet, embeddings: np.ndarray, feature_dim: int):
        if net.out_dim != 2 * feature_dim:
            raise ValidationError("dimension-mismatch", "network must emit mean and log-variance heads")
        self.net = net
        self.embeddings = np.array(embeddings, dtype=np.float64)
        self.feature_dim = feature_dim
        if self.embeddings.shape[1] != net.in_dim:
            raise ValidationError("dimension-mismatch", "embedding width differs from network input")

    @classmethod
    def build(cls, feature_dim: int, embeddings: np.ndarray, rng: np.random.Generator,
              hidden: Sequence[int] = (64, 64)) -> "ConditionalGaussian":
        embeddings = np.asarray(embeddings, dtype=np.float64)
        sizes = (embeddings.shape[1], *hidden, 2 * feature_dim)
        net = DenseNet.build(sizes, ["relu"] * len(hidden) + ["identity"], rng)
        return cls(net, embeddings, feature_dim)

    @property
    def num_tasks(self):
        return self.embeddings.shape[0]

    def params(self):
        return self.net.params() + [self.embeddings]

    def heads(self, E):
        out = self.net(np.atleast_2d(E))
        d = self.feature_dim
        return out[:, :d], np.maximum(out[:, d:], LOGVAR_FLOOR)

    def logpdf_with(self, E, X) -> np.ndarray:
        mu, s = self.heads(E)
        return _diag_logpdf(np.atleast_2d(X), mu, s)

    def nll(self, task_ids, X, training=False, rng=None):
        n, d = X.shape
        out, tape = self.net.forward(self.embeddings[task_ids], training, rng)
        mu, raw_s = out[:, :d], out[:, d:]
        s = np.maximum(raw_s, LOGVAR_FLOOR)
        loss = -float(np.mean(_diag_logpdf(X, mu, s)))
        if not training:
            return loss, None
        inv = np.exp(-s)
        diff = X - mu
        dmu = -diff * inv / n
        ds = (0.5 - 0.5 * diff * diff * inv) / n
        ds = ds * (raw_s > LOGVAR_FLOOR)
        g, gin = self.net.backward(tape, np.concatenate([dmu, ds], axis=1))
        gE = np.zeros_like(self.embeddings)
        np.add.at(gE, task_ids, gin)
        return loss, g + [gE]

    def to_arrays(self):
        arrays, meta = net_to_arrays(self.net, "gauss")
        arrays["embeddings"] = self.embeddings
        return arrays, {"kind": "gaussian", "net": meta, "feature_dim": self.feature_dim}

    @classmethod
    def from_arrays(cls, arrays, meta):
        return cls(net_from_arrays(arrays, "gauss", meta["net"]), arrays["embeddings"], meta["feature_dim"])


def _diag_logpdf(X, mu, s):
    return np.sum(-0.5 * LOG_2PI - 0.5 * s - (X - mu) ** 2 / (2.0 * np.exp(s)), axis=-1)


def gaussian_logpdf(model: ConditionalGaussian, e, x) -> float:
    """Log-density of ``x`` under the Gaussian the model assigns to embedding ``e``."""
    e = getattr(e, "vector", e)
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != model.feature_dim:
        raise ValidationError("dimension-mismatch", f"x has {x.shape[-1]} features, model {model.feature_dim}")
    v = model.logpdf_with(np.asarray(e, dtype=np.float64), x)
    return float(v[0]) if x.ndim == 1 else v


# -- masked affine autoregressive flow ----------------------------------------


def made_masks(d: int, hidden: Sequence[int]) -> list:
    """Masks for a MADE stack so output ``i`` sees only inputs ``< i``."""
    in_deg = np.arange(1, d + 1)
    degs = [in_deg]
    for h in hidden:
        degs.append(np.zeros(h, dtype=int) if d == 1 else np.arange(h) % (d - 1) + 1)
    masks = [(degs[i + 1][None, :] >= degs[i][:, None]).astype(np.float64) for i in range(len(hidden))]
    masks.append((in_deg[None, :] > degs[-1][:, None]).astype(np.float64))
    return masks


class AffineFlow:
    """Stack of K (masked affine autoregressive layer, actnorm) blocks.

    In the data-to-noise direction a block maps ``h`` to
    ``u = (h - mu(h)) * exp(-alpha(h))`` followed by
    ``(u - shift) * exp(-logscale)``.  ``mu`` and ``alpha`` are separate
    masked networks whose outputs are modulated per task by
    ``raw * tanh(e_scale) + tanh(e_bias)``.  Dimension order is reversed
    between consecutive blocks.  Each task has a unit-covariance Gaussian
    prior with a fixed mean.
    """

    def __init__(self, d, num_tasks, blocks, prior_means):
        self.d = d
        self.num_tasks = num_tasks
        self.blocks = blocks
        self.prior_means = np.array(prior_means, dtype=np.float64)
        self.initialized = all(b["init"] for b in blocks)

    @classmethod
    def build(cls, d: int, num_tasks: int, rng: np.random.Generator, n_blocks: int = 5,
              hidden: int = 64, n_layers: int = 4, prior_range: float = 1.0) -> "AffineFlow":
        widths = [hidden] * (n_layers - 1)
        masks = made_masks(d, widths)
        acts = ["relu"] * (n_layers - 1) + ["identity"]
        blocks = []
        for _ in range(n_blocks):
            mu_net = DenseNet.build((d, *widths, d), acts, rng, masks=masks)
            al_net = DenseNet.build((d, *widths, d), acts, rng, masks=masks)
            # start near the identity map
            for net in (mu_net, al_net):
                net.layers[-1].weight *= 0.1
            blocks.append({
                "mu_net": mu_net, "al_net": al_net,
                "mu_scale": np.ones((num_tasks, d)), "mu_bias": np.zeros((num_tasks, d)),
                "al_scale": np.ones((num_tasks, d)), "al_bias": np.zeros((num_tasks, d)),
                "shift": np.zeros(d), "logscale": np.zeros(d), "init": False,
            })
        priors = rng.uniform(-prior_range, prior_range, size=(num_tasks, d))
        return cls(d, num_tasks, blocks, priors)

    _TABLES = ("mu_scale", "mu_bias", "al_scale", "al_bias", "shift", "logscale")

    def params(self):
        out = []
        for b in self.blocks:
            out += b["mu_net"].params() + b["al_net"].params()
            out += [b[k] for k in self._TABLES]
        return out

    def _conditioner(self, b, h, t, training=False):
        mu_raw, mu_tape = b["mu_net"].forward(h)
        al_raw, al_tape = b["al_net"].forward(h)
        mu = mu_raw * np.tanh(b["mu_scale"][t]) + np.tanh(b["mu_bias"][t])
        al_pre = al_raw * np.tanh(b["al_scale"][t]) + np.tanh(b["al_bias"][t])
        alpha = np.clip(al_pre, -ALPHA_CLAMP, ALPHA_CLAMP)
        return mu, alpha, (mu_raw, mu_tape, al_raw, al_tape, al_pre)

    def _check(self, t, x):
        x = np.asarray(x, dtype=np.float64)
        squeeze = x.ndim == 1
        X = x.reshape(1, -1) if squeeze else x
        if X.shape[1] != self.d:
            raise ValidationError("dimension-mismatch", f"x has {X.shape[1]} features, flow {self.d}")
        t = np.broadcast_to(np.asarray(t, dtype=np.int64), (len(X),))
        if np.any((t < 0) | (t >= self.num_tasks)):
            raise KeyError("unknown task id")
        return t, X, squeeze

    def _inverse(self, t, X, keep=False):
        h, logdet, caches = X, np.zeros(len(X)), []
        for i, b in enumerate(self.blocks):
            if i > 0:
                h = h[:, ::-1]
            mu, alpha, cc = self._conditioner(b, h, t)
            u = (h - mu) * np.exp(-alpha)
            v = (u - b["shift"]) * np.exp(-b["logscale"])
            logdet -= alpha.sum(1) + b["logscale"].sum()
            if keep:
                caches.append((h, mu, alpha, u, cc))
            h = v
        return h, logdet, caches

    def block_inverse(self, i, task_id, h):
        """Block ``i`` alone (autoregressive layer then actnorm), no permutation."""
        t, H, squeeze = self._check(task_id, h)
        b = self.blocks[i]
        mu, alpha, _ = self._conditioner(b, H, t)
        v = ((H - mu) * np.exp(-alpha) - b["shift"]) * np.exp(-b["logscale"])
        return v[0] if squeeze else v

    def inverse(self, task_id, x):
        """Map data to base space; returns ``(u, log|det du/dx|)``."""
        t, X, squeeze = self._check(task_id, x)
        z, ld, _ = self._inverse(t, X)
        return (z[0], float(ld[0])) if squeeze else (z, ld)

    def forward(self, task_id, u):
        """Map base-space points back to data space (sequential per dimension)."""
        t, Z, squeeze = self._check(task_id, u)
        h = Z
        for i in reversed(range(len(self.blocks))):
            b = self.blocks[i]
            uu = h * np.exp(b["logscale"]) + b["shift"]
            x = np.zeros_like(uu)
            for j in range(self.d):
                mu, alpha, _ = self._conditioner(b, x, t)
                x[:, j] = uu[:, j] * np.exp(alpha[:, j]) + mu[:, j]
            h = x[:, ::-1] if i > 0 else x
        return h[0] if squeeze else h

    def logpdf(self, task_id, x):
        t, X, squeeze = self._check(task_id, x)
        z, ld, _ = self._inverse(t, X)
        diff = z - self.prior_means[t]
        lp = -0.5 * (diff * diff).sum(1) - 0.5 * self.d * LOG_2PI + ld
        return float(lp[0]) if squeeze else lp

    def initialize(self, task_ids, X):
        """Data-dependent actnorm init: unit variance, zero mean per block."""
        h = X
        for i, b in enumerate(self.blocks):
            if i > 0:
                h = h[:, ::-1]
            mu, alpha, _ = self._conditioner(b, h, task_ids)
            u = (h - mu) * np.exp(-alpha)
            if not b["init"]:
                b["shift"][...] = u.mean(0)
                b["logscale"][...] = np.log(u.std(0) + 1e-6)
                b["init"] = True
            h = (u - b["shift"]) * np.exp(-b["logscale"])
        self.initialized = True

    def nll(self, task_ids, X, training=False, rng=None):
        n = len(X)
        z, ld, caches = self._inverse(task_ids, X, keep=training)
        diff = z - self.prior_means[task_ids]
        lp = -0.5 * (diff * diff).sum(1) - 0.5 * self.d * LOG_2PI + ld
        loss = -float(lp.mean())
        if not training:
            return loss, None
        g = diff / n
        grads_by_block = []
        for i in reversed(range(len(self.blocks))):
            b = self.blocks[i]
            h, mu, alpha, u, (mu_raw, mu_tape, al_raw, al_tape, al_pre) = caches[i]
            es = np.exp(-b["logscale"])
            d_logscale = (-(g * (u - b["shift"]) * es)).sum(0) + 1.0
            d_shift = -(g * es).sum(0)
            gu = g * es
            ea = np.exp(-alpha)
            dh = gu * ea
            dmu = -gu * ea
            dal = (-gu * u + 1.0 / n) * (np.abs(al_pre) < ALPHA_CLAMP)
            tabs = {}
            for name, draw, raw in (("mu", dmu, mu_raw), ("al", dal, al_raw)):
                sc = np.tanh(b[f"{name}_scale"][task_ids])
                bi = np.tanh(b[f"{name}_bias"][task_ids])
                g_sc = np.zeros_like(b[f"{name}_scale"])
                g_bi = np.zeros_like(b[f"{name}_bias"])
                np.add.at(g_sc, task_ids, draw * raw * (1.0 - sc * sc))
                np.add.at(g_bi, task_ids, draw * (1.0 - bi * bi))
                tabs[name] = (draw * sc, g_sc, g_bi)
            g_mu_net, gin_mu = b["mu_net"].backward(mu_tape, tabs["mu"][0])
            g_al_net, gin_al = b["al_net"].backward(al_tape, tabs["al"][0])
            dh = dh + gin_mu + gin_al
            grads_by_block.append(
                g_mu_net + g_al_net
                + [tabs["mu"][1], tabs["mu"][2], tabs["al"][1], tabs["al"][2], d_shift, d_logscale]
            )
            g = dh[:, ::-1] if i > 0 else dh
        grads = []
        for gb in reversed(grads_by_block):
            grads += gb
        return loss, grads

    def to_arrays(self):
        arrays, meta_blocks = {}, []
        for i, b in enumerate(self.blocks):
            a1, m1 = net_to_arrays(b["mu_net"], f"flow.{i}.mu")
            a2, m2 = net_to_arrays(b["al_net"], f"flow.{i}.al")
            arrays.update(a1)
            arrays.update(a2)
            for k in self._TABLES:
                arrays[f"flow.{i}.{k}"] = b[k]
            meta_blocks.append({"mu_net": m1, "al_net": m2, "init": b["init"]})
        arrays["prior_means"] = self.prior_means
        return arrays, {"kind": "flow", "d": self.d, "num_tasks": self.num_tasks, "blocks": meta_blocks,
                        "permutation": "reverse-between-blocks"}

    @classmethod
    def from_arrays(cls, arrays, meta):
        blocks = []
        for i, m in enumerate(meta["blocks"]):
            b = {"mu_net": net_from_arrays(arrays, f"flow.{i}.mu", m["mu_net"]),
                 "al_net": net_from_arrays(arrays, f"flow.{i}.al", m["al_net"]),
                 "init": m["init"]}
            for k in cls._TABLES:
                b[k] = np.array(arrays[f"flow.{i}.{k}"])
            blocks.append(b)
        return cls(meta["d"], meta["num_tasks"], blocks, arrays["prior_means"])


def flow_inverse(flow: AffineFlow, task_id, x):
    return flow.inverse(task_id, x)


def flow_forward(flow: AffineFlow, task_id, u):
    return flow.forward(task_id, u)


def flow_logpdf(flow: AffineFlow, task_id, x):
    return flow.logpdf(task_id, x)


# -- training & scoring -------------------------------------------------------


def train_density(model, c: TaskCollection, embeddings: Optional[np.ndarray] = None,
                  cfg: Optional[TrainConfig] = None, rng: Optional[np.random.Generator] = None):
    """Maximum-likelihood fit; returns ``(model, trace)`` at the best validation epoch.

    ``embeddings`` replaces the Gaussian model's embedding table when given
    (it stays trainable).  Samples are drawn by picking a task with
    probability ``m_t`` and then one of its samples uniformly.
    """
    from .clr import PopulationSampler, split_collection

    cfg = cfg or TrainConfig()
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    validate_collection(c)
    if isinstance(model, ConditionalGaussian):
        if embeddings is not None:
            embeddings = np.asarray(embeddings, dtype=np.float64)
            if embeddings.shape != model.embeddings.shape:
                raise ValidationError("dimension-mismatch",
                                      f"embedding table {embeddings.shape} != {model.embeddings.shape}")
            model.embeddings[...] = embeddings
        if model.num_tasks != c.num_tasks:
            raise ValidationError("dimension-mismatch", "embeddings must cover every task")
    elif model.num_tasks != c.num_tasks:
        raise ValidationError("dimension-mismatch", "flow conditioning must cover every task")

    train, val_parts = split_collection(c, cfg.val_fraction, rng)
    sampler = PopulationSampler(train)

    def draw(r, n):
        b = sampler.sample(n, r)
        return b.task_ids, b.positives

    parts = [(t, v) for t, v in enumerate(val_parts) if len(v)]
    val = None
    if parts:
        val = (np.concatenate([np.full(len(v), t, dtype=np.int64) for t, v in parts]),
               np.concatenate([v for _, v in parts]))

    if isinstance(model, AffineFlow) and not model.initialized:
        model.initialize(*draw(rng, max(cfg.batch_size, 512)))

    def loss_fn(batch, training, r):
        return model.nll(batch[0], batch[1], training, r)

    steps = cfg.steps_per_epoch or max(1, math.ceil(len(sampler.X) / cfg.batch_size))
    trace = run_training(model.params, loss_fn, draw, val, cfg, steps, rng)
    return model, trace


def density_score(model, task, x):
    """Log-density of ``x`` for a task id, or (Gaussian only) an embedding vector."""
    if isinstance(model, ConditionalGaussian):
        if np.ndim(task) == 0 and not hasattr(task, "vector"):
            t = int(task)
            if not 0 <= t < model.num_tasks:
                raise KeyError(f"unknown task id {t}")
            return gaussian_logpdf(model, model.embeddings[t], x)
        return gaussian_logpdf(model, task, x)
    if isinstance(model, AffineFlow):
        if np.ndim(task) != 0:
            raise ValidationError("unsupported", "flow conditioning is per task id, not by embedding")
        return model.logpdf(int(task), x)
    raise TypeError(f"not a density model: {type(model).__name__}")


def density_from_arrays(arrays, meta):
    if meta["kind"] == "gaussian":
        return ConditionalGaussian.from_arrays(arrays, meta)
    if meta["kind"] == "flow":
        return AffineFlow.from_arrays(arrays, meta)
    raise ValueError(f"unknown density model kind {meta['kind']!r}")
