"""End-to-end recipes: initialise embeddings, train a model, evaluate it."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import embed
from .clr import RatioModel, TrainConfig, estimate_clr, ratio_model_from_arrays, ratio_model_to_arrays
from .core import Benchmark, EvalReport, ValidationError
from .density import AffineFlow, ConditionalGaussian, density_from_arrays, density_score, train_density
from .evaluation import evaluate_generalization, evaluate_scorer
from .nn import load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

MODELS = ("clr", "gaussian", "flow")
INITS = ("random", "learned", "histogram", "label", "pseudo")


class ConfigError(ValidationError):
    def __init__(self, message):
        super().__init__("config", message)


@dataclass
class Trained:
    kind: str
    init: str
    model: object
    init_table: Optional[np.ndarray] = None
    pre_model: Optional[embed.PreEmbeddingModel] = None
    projection: Optional[np.ndarray] = None
    trace: list = field(default_factory=list)
    pre_trace: list = field(default_factory=list)
    gmm_log_likelihoods: list = field(default_factory=list)


def _streams(seed: int, n: int):
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


def initial_embeddings(init: str, b: Benchmark, cfg: TrainConfig, seed: int, m0: Optional[int] = None,
                       embed_dim: Optional[int] = None, pre_cfg: Optional[TrainConfig] = None):
    """Return ``(table, extras)`` for the chosen initialiser.

    ``extras`` may hold ``pre_model``, ``projection``, ``pre_trace`` and
    ``gmm_log_likelihoods``.  Widths: random uses ``embed_dim`` (default
    ``cfg.embed_dim``); learned uses M0 unless ``embed_dim`` differs, in
    which case a recorded random projection is applied; label, histogram
    and pseudo use the label arity.
    """
    c = b.train
    r_seed, r_pre, r_init, r_proj = _streams(seed, 4)
    extras: dict = {}
    if init == "random":
        return embed.random_embedding(c.num_tasks, embed_dim or cfg.embed_dim, r_init), extras
    if init == "learned":
        if m0 is None:
            raise ConfigError("--init learned requires --m0")
        seeds = embed.select_seed_tasks(c, m0, r_seed)
        pre, pre_trace = embed.train_pre_embedding(c, seeds, pre_cfg or cfg, r_pre)
        table = embed.learned_embeddings(pre, c)
        table, proj = embed.fit_to_width(table, embed_dim, r_proj)
        extras.update(pre_model=pre, projection=proj, pre_trace=pre_trace)
        return table, extras
    if init == "label":
        if b.active is None:
            raise ConfigError("label initialisation needs ground-truth active category sets")
        return np.stack([embed.label_embedding(a, b.label_arity, t).vector for t, a in enumerate(b.active)]), extras
    if init == "histogram":
        if not c.labels_available() or b.label_arity is None:
            raise ConfigError("histogram initialisation needs per-sample labels")
        return np.stack([embed.histogram_embedding(t, b.label_arity).vector for t in c.tasks]), extras
    if init == "pseudo":
        comps = b.label_arity or embed_dim or cfg.embed_dim
        table, gmm = embed.pseudo_label_embedding(c, comps, r_init)
        extras["gmm_log_likelihoods"] = gmm.log_likelihoods
        return table, extras
    raise ConfigError(f"unknown init {init!r}; choose from {INITS}")


def train(b: Benchmark, model: str = "clr", init: str = "random", cfg: Optional[TrainConfig] = None,
          seed: int = 0, m0: Optional[int] = None, embed_dim: Optional[int] = None,
          pre_cfg: Optional[TrainConfig] = None, flow_blocks: int = 5, flow_hidden: int = 64) -> Trained:
    cfg = cfg or TrainConfig(seed=seed)
    if model not in MODELS:
        raise ConfigError(f"unknown model {model!r}; choose from {MODELS}")
    if model == "flow" and init != "random":
        raise ConfigError("the flow carries its own per-task conditioning; use --init random")
    _, r_build, r_train = _streams(seed + 7919, 3)
    if model == "flow":
        flow = AffineFlow.build(b.train.feature_dim, b.num_tasks, r_build, n_blocks=flow_blocks, hidden=flow_hidden)
        flow, trace = train_density(flow, b.train, cfg=cfg, rng=r_train)
        return Trained("flow", init, flow, trace=trace)
    table, extras = initial_embeddings(init, b, cfg, seed, m0, embed_dim, pre_cfg)
    if model == "clr":
        m, trace = estimate_clr(b.train, table, cfg, r_train)
    else:
        g = ConditionalGaussian.build(b.train.feature_dim, table, r_build)
        m, trace = train_density(g, b.train, cfg=cfg, rng=r_train)
    return Trained(model, init, m, init_table=table, pre_model=extras.get("pre_model"),
                   projection=extras.get("projection"), trace=trace, pre_trace=extras.get("pre_trace", []),
                   gmm_log_likelihoods=extras.get("gmm_log_likelihoods", []))


def scorer_of(model):
    if isinstance(model, RatioModel):
        return lambda t, X: model.score(t, X)
    return lambda t, X: density_score(model, t, X)


def evaluate(trained: Trained, b: Benchmark, config: dict) -> EvalReport:
    return evaluate_scorer(scorer_of(trained.model), b, config)


def generalize(trained: Trained, test_b: Benchmark, config: dict) -> EvalReport:
    if trained.pre_model is None:
        raise ConfigError("generalisation needs a model trained with --init learned")
    if isinstance(trained.model, RatioModel):
        return evaluate_generalization(trained.pre_model, trained.model, test_b, config, trained.projection)
    if isinstance(trained.model, ConditionalGaussian):
        embs = embed.learned_embeddings(trained.pre_model, test_b.train)
        if trained.projection is not None:
            embs = embs @ trained.projection
        return evaluate_scorer(lambda t, X: density_score(trained.model, embs[t], X), test_b, config)
    raise ConfigError("the flow cannot score unseen tasks")


# -- checkpoints ---------------------------------------------------------------


def save(trained: Trained, path):
    if trained.kind == "clr":
        arrays, meta = ratio_model_to_arrays(trained.model)
    else:
        arrays, meta = trained.model.to_arrays()
    meta = {"model": meta, "kind": trained.kind, "init": trained.init}
    if trained.init_table is not None:
        arrays["init_table"] = trained.init_table
    if trained.pre_model is not None:
        a, m = trained.pre_model.to_arrays()
        arrays.update(a)
        meta["pre_model"] = m
    if trained.projection is not None:
        arrays["projection"] = trained.projection
    save_checkpoint(path, arrays, meta)


def load(path) -> Trained:
    arrays, meta = load_checkpoint(path)
    kind = meta["kind"]
    model = ratio_model_from_arrays(arrays, meta["model"]) if kind == "clr" else density_from_arrays(arrays, meta["model"])
    pre = embed.PreEmbeddingModel.from_arrays(arrays, meta["pre_model"]) if "pre_model" in meta else None
    return Trained(kind, meta["init"], model, init_table=arrays.get("init_table"), pre_model=pre,
                   projection=arrays.get("projection"))
