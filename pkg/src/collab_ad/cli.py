"""``collab-ad`` command line: synth, ingest, train, eval and verify.

Every subcommand accepts ``--config FILE`` (JSON object of settings),
``--seed`` and ``--out``.  Flags given on the command line override the
file, which overrides built-in defaults.  The merged settings are written
to ``<out>/resolved_config.json``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 oracle
failure, 5 training divergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from typing import Optional

import numpy as np

from . import data, embed, pipeline, synth
from .clr import TrainConfig, score_single_task, write_trace
from .core import DataError, TrainingError, ValidationError
from .density import AffineFlow
from .evaluation import (
    UndefinedCorrelationError,
    auc,
    auc_bruteforce,
    flow_density_mass,
    flow_masking_violation,
    flow_roundtrip_error,
    random_gradcheck_nets,
    ratio_recovery_error,
    similarity_rank_correlation,
    verify_base_optimality,
    write_matrix_csv,
    write_report,
)
from .pipeline import ConfigError

log = logging.getLogger("collab_ad")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_ORACLE = 4
EXIT_TRAINING = 5

# settings that locate files rather than shape the computation
_PLUMBING = ("config", "out", "command")

DEFAULTS = {
    "synth": {"L": 10, "k": 1, "d": 10, "n": 1000, "sigma": 1.0, "center_scale": 3.0,
              "test_fraction": 0.2, "seed": 0},
    "ingest": {"events": None, "users": None, "min_exposures": 100, "keep_fraction": 0.5,
               "label": "age", "split_seed": None, "train_ratio": 0.8, "seed": 0},
    "train": {"benchmark": None, "model": "clr", "init": "random", "m0": None, "seed": 0,
              "flow_blocks": 5, "flow_hidden": 64, **{k: v for k, v in TrainConfig().to_dict().items()
                                                      if k != "seed"}},
    "eval": {"benchmark": None, "checkpoint": None, "generalize": False, "test_benchmark": None,
             "emit_similarity": False, "experiment": None, "seed": 0},
    "verify": {"oracle": "all", "trials": None, "seed": 0},
}

ORACLES = ("prop1", "ratio", "gradcheck", "flow", "auc")


# -- configuration --------------------------------------------------------------


def resolve(command: str, ns: argparse.Namespace) -> dict:
    """Defaults, then the JSON config file, then explicit flags."""
    cfg = dict(DEFAULTS[command])
    flags = {k: v for k, v in vars(ns).items() if k != "command"}
    path = flags.get("config")
    if path:
        try:
            with open(path) as fh:
                from_file = json.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file {path!r} not found")
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})")
        if not isinstance(from_file, dict):
            raise ConfigError(f"{path}: expected a JSON object")
        unknown = sorted(set(from_file) - set(cfg) - set(_PLUMBING))
        if unknown:
            raise ConfigError(f"{path}: unknown settings {unknown}")
        cfg.update(from_file)
    cfg.update(flags)
    if not cfg.get("out"):
        raise ConfigError("--out is required")
    for key in ("hidden", "dropout"):
        if isinstance(cfg.get(key), list):
            cfg[key] = tuple(cfg[key])
    return cfg


def _dump(cfg: dict) -> dict:
    return {k: (list(v) if isinstance(v, tuple) else v) for k, v in sorted(cfg.items())}


def write_resolved(cfg: dict):
    os.makedirs(cfg["out"], exist_ok=True)
    with open(os.path.join(cfg["out"], "resolved_config.json"), "w") as fh:
        json.dump(_dump(cfg), fh, indent=2, sort_keys=True)
        fh.write("\n")


def _report_config(cfg: dict) -> dict:
    return {k: v for k, v in _dump(cfg).items() if k not in _PLUMBING}


def _train_config(cfg: dict) -> TrainConfig:
    keys = TrainConfig().to_dict().keys()
    return TrainConfig.from_dict({k: cfg[k] for k in keys if k in cfg})


# -- commands -------------------------------------------------------------------


def cmd_synth(cfg: dict) -> int:
    sc = synth.SynthConfig(L=cfg["L"], d=cfg["d"], k=cfg["k"], n_per_category=cfg["n"], sigma=cfg["sigma"],
                           center_scale=cfg["center_scale"], test_fraction=cfg["test_fraction"], seed=cfg["seed"])
    b = synth.generate(sc)
    write_resolved(cfg)
    data.write_benchmark(b, cfg["out"], b.test_labels, b.test_X)
    log.info("wrote %d tasks to %s", b.num_tasks, cfg["out"])
    print(f"{b.num_tasks} tasks written to {cfg['out']}")
    return EXIT_OK


def cmd_ingest(cfg: dict) -> int:
    if not cfg["events"] or not cfg["users"]:
        raise ConfigError("ingest needs --events and --users")
    events, users = data.load(cfg["events"], cfg["users"])
    split_seed = cfg["seed"] if cfg["split_seed"] is None else cfg["split_seed"]
    b = data.benchmark_from_logs(events, users, min_exposures=cfg["min_exposures"],
                                 keep_fraction=cfg["keep_fraction"], label_key=cfg["label"],
                                 split_seed=split_seed, train_ratio=cfg["train_ratio"])
    write_resolved(cfg)
    data.write_benchmark(b, cfg["out"])
    print(f"{b.num_tasks} tasks written to {cfg['out']} ({len(b.meta['dropped'])} items dropped)")
    return EXIT_OK


def _benchmark(path) -> "data.Benchmark":
    if not path:
        raise ConfigError("--benchmark is required")
    if not os.path.isdir(path):
        raise DataError(f"benchmark directory {path!r} not found")
    return data.read_benchmark(path)


def cmd_train(cfg: dict) -> int:
    b = _benchmark(cfg["benchmark"])
    if cfg["model"] not in pipeline.MODELS:
        raise ConfigError(f"unknown model {cfg['model']!r}")
    if cfg["init"] not in pipeline.INITS:
        raise ConfigError(f"unknown init {cfg['init']!r}")
    if cfg["init"] == "learned" and cfg["m0"] is None:
        raise ConfigError("--init learned requires --m0")
    tc = _train_config(cfg)
    trained = pipeline.train(b, cfg["model"], cfg["init"], tc, seed=cfg["seed"], m0=cfg["m0"],
                             flow_blocks=cfg["flow_blocks"], flow_hidden=cfg["flow_hidden"])
    out = cfg["out"]
    write_resolved(cfg)
    pipeline.save(trained, os.path.join(out, "model.npz"))
    write_trace(os.path.join(out, "loss_trace.csv"), trained.trace)
    if trained.pre_trace:
        write_trace(os.path.join(out, "pre_loss_trace.csv"), trained.pre_trace)
    if trained.init_table is not None:
        data.write_embeddings(os.path.join(out, "embeddings_init.csv"), trained.init_table)
    if hasattr(trained.model, "embeddings"):
        data.write_embeddings(os.path.join(out, "embeddings.csv"), trained.model.embeddings)
    if trained.gmm_log_likelihoods:
        with open(os.path.join(out, "gmm_log_likelihood.csv"), "w") as fh:
            fh.write("iteration,mean_log_likelihood\n")
            for i, v in enumerate(trained.gmm_log_likelihoods):
                fh.write(f"{i},{v!r}\n")
    last = trained.trace[-1]
    print(f"trained {cfg['model']}/{cfg['init']} on {b.num_tasks} tasks; "
          f"final train loss {last.train_loss:.4f}, val loss {last.val_loss:.4f}")
    return EXIT_OK


def _checkpoint_path(path) -> str:
    if not path:
        raise ConfigError("--checkpoint is required")
    if os.path.isdir(path):
        path = os.path.join(path, "model.npz")
    if not os.path.isfile(path):
        raise DataError(f"checkpoint {path!r} not found")
    return path


def _training_settings(ckpt: str) -> Optional[dict]:
    p = os.path.join(os.path.dirname(ckpt), "resolved_config.json")
    if not os.path.isfile(p):
        return None
    with open(p) as fh:
        return {k: v for k, v in json.load(fh).items() if k not in _PLUMBING}


def cmd_eval(cfg: dict) -> int:
    ckpt = _checkpoint_path(cfg["checkpoint"])
    trained = pipeline.load(ckpt)
    b = _benchmark(cfg["benchmark"]) if cfg["benchmark"] else None
    if cfg["generalize"]:
        if not cfg["test_benchmark"]:
            raise ConfigError("--generalize needs --test-benchmark")
        target = _benchmark(cfg["test_benchmark"])
    else:
        if b is None:
            raise ConfigError("--benchmark is required")
        target = b
    experiment = cfg["experiment"] or "_".join(
        [trained.kind, trained.init] + (["generalize"] if cfg["generalize"] else []))
    rc = _report_config(cfg)
    rc["training"] = _training_settings(ckpt)
    rc["tasks"] = {"m": target.num_tasks, "n": int(sum(t.size for t in target.train.tasks))}
    report = (pipeline.generalize(trained, target, rc) if cfg["generalize"]
              else pipeline.evaluate(trained, target, rc))
    write_resolved(cfg)
    if cfg["emit_similarity"]:
        report.extra.update(_emit_similarity(trained, target, cfg["out"], cfg["generalize"]))
    jpath, _ = write_report(report, cfg["out"], experiment, cfg["seed"])
    print(report.to_table())
    print(f"report written to {jpath}")
    return EXIT_OK


def _emit_similarity(trained, target, out, unseen: bool) -> dict:
    if trained.pre_model is not None:
        table = embed.learned_embeddings(trained.pre_model, target.train)
    elif unseen or not hasattr(trained.model, "embeddings"):
        raise ConfigError("--emit-similarity needs task embeddings for the evaluated tasks")
    else:
        table = trained.model.embeddings
    S = embed.similarity_matrix(table)
    write_matrix_csv(os.path.join(out, "similarity.csv"), S, target.names)
    extra = {}
    if target.active is not None:
        O = synth.overlap_matrix(target.active)
        write_matrix_csv(os.path.join(out, "overlap.csv"), O, target.names)
        try:
            extra["similarity_spearman"] = similarity_rank_correlation(S, O)
        except (ValidationError, UndefinedCorrelationError):
            # constant overlap (k=1, or a single task) leaves the rank correlation undefined
            extra["similarity_spearman"] = None
    return extra


# -- verify ---------------------------------------------------------------------


def _oracle_prop1(rng, trials):
    trials = trials or 50
    worst = -math.inf
    for _ in range(trials):
        qs = rng.dirichlet(np.ones(3), size=2)
        m = rng.dirichlet(np.ones(2))
        r = verify_base_optimality(list(qs), m, resolution=200)
        worst = max(worst, r.j_mixture - r.j_grid_min)
    return {"trials": trials, "worst_gap": worst, "passed": bool(worst <= 1e-6)}


def _oracle_ratio(rng, trials):
    cfg = TrainConfig(epochs=20, batch_size=256, lr=1e-3, hidden=(32, 32), dropout=(0.0, 0.0))
    n = 50_000
    s, _ = score_single_task(rng.normal(1.0, 1.0, n), rng.normal(0.0, 1.0, n), cfg, rng)
    err = ratio_recovery_error(s, (1.0, 1.0), (0.0, 1.0))
    c, _ = score_single_task(rng.normal(0.0, 1.0, n), rng.normal(0.0, 1.0, n), cfg, rng)
    ctrl = ratio_recovery_error(c, (0.0, 1.0), (0.0, 1.0))
    return {"max_error": err, "control_max_abs": ctrl, "passed": bool(err < 0.15 and ctrl < 0.10)}


def _oracle_gradcheck(rng, trials):
    trials = max(trials or 20, 1)
    worst = random_gradcheck_nets(trials, rng)
    return {"nets": trials, "max_relative_error": worst, "passed": bool(worst < 1e-4)}


def _perturbed_flow(d, m, rng, n_blocks=3, hidden=16):
    flow = AffineFlow.build(d, m, rng, n_blocks=n_blocks, hidden=hidden)
    for b in flow.blocks:
        for key in AffineFlow._TABLES:
            b[key] += rng.normal(scale=0.3, size=b[key].shape)
    return flow


def _oracle_flow(rng, trials):
    flow = _perturbed_flow(4, 3, rng)
    X = rng.normal(size=(64, 4))
    t = rng.integers(0, 3, size=64)
    rt = flow_roundtrip_error(flow, t, X)
    mask = max(flow_masking_violation(flow, int(t[i]), X[i]) for i in range(4))
    mass = flow_density_mass(_perturbed_flow(1, 2, rng), 1)
    ok = rt < 1e-9 and mask < 1e-8 and abs(mass - 1.0) < 0.02
    return {"roundtrip_error": rt, "masking_violation": mask, "density_mass_1d": mass, "passed": bool(ok)}


def _oracle_auc(rng, trials):
    trials = trials or 1000
    mismatches = 0
    for _ in range(trials):
        a = rng.integers(0, 6, size=rng.integers(1, 30)) / 5.0
        b = rng.integers(0, 6, size=rng.integers(1, 30)) / 5.0
        if auc(a, b) != auc_bruteforce(a, b):
            mismatches += 1
    hand = auc([0.9, 0.4], [0.5, 0.1])
    return {"trials": trials, "mismatches": mismatches, "hand_case": hand,
            "passed": bool(mismatches == 0 and hand == 0.75)}


_ORACLE_FNS = {"prop1": _oracle_prop1, "ratio": _oracle_ratio, "gradcheck": _oracle_gradcheck,
               "flow": _oracle_flow, "auc": _oracle_auc}


def run_oracles(names, seed: int, trials: Optional[int] = None) -> dict:
    streams = np.random.SeedSequence(seed).spawn(len(ORACLES))
    results = {}
    for name, ss in zip(ORACLES, streams):
        if name in names:
            results[name] = _ORACLE_FNS[name](np.random.default_rng(ss), trials)
    return results


def cmd_verify(cfg: dict) -> int:
    names = ORACLES if cfg["oracle"] == "all" else (cfg["oracle"],)
    if any(n not in ORACLES for n in names):
        raise ConfigError(f"unknown oracle {cfg['oracle']!r}")
    results = run_oracles(names, cfg["seed"], cfg["trials"])
    write_resolved(cfg)
    doc = {"config": _report_config(cfg), "oracles": results,
           "passed": all(r["passed"] for r in results.values())}
    path = os.path.join(cfg["out"], f"report_verify_{cfg['seed']}.json")
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    for name, r in results.items():
        print(f"{'PASS' if r['passed'] else 'FAIL'}  {name}")
    return EXIT_OK if doc["passed"] else EXIT_ORACLE


# -- parser ---------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    S = argparse.SUPPRESS
    p = argparse.ArgumentParser(prog="collab-ad", description=__doc__.split("\n\n")[0])
    p.add_argument("--log-level", default="WARNING")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", default=S, help="JSON settings file (flags override it)")
        sp.add_argument("--seed", type=int, default=S)
        sp.add_argument("--out", default=S, help="output directory")

    sp = sub.add_parser("synth", help="generate a synthetic blob benchmark")
    common(sp)
    sp.add_argument("--L", type=int, default=S, help="number of categories")
    sp.add_argument("--k", type=int, default=S, help="active categories per task")
    sp.add_argument("--d", type=int, default=S, help="feature dimension")
    sp.add_argument("--n", type=int, default=S, help="samples per category")
    sp.add_argument("--sigma", type=float, default=S)
    sp.add_argument("--center-scale", type=float, default=S)
    sp.add_argument("--test-fraction", type=float, default=S)

    sp = sub.add_parser("ingest", help="build a benchmark from exposure logs")
    common(sp)
    sp.add_argument("--events", default=S)
    sp.add_argument("--users", default=S)
    sp.add_argument("--min-exposures", type=int, default=S)
    sp.add_argument("--keep-fraction", type=float, default=S)
    sp.add_argument("--label", default=S)
    sp.add_argument("--split-seed", type=int, default=S)
    sp.add_argument("--train-ratio", type=float, default=S)

    sp = sub.add_parser("train", help="train a scoring model")
    common(sp)
    sp.add_argument("--benchmark", default=S)
    sp.add_argument("--model", choices=pipeline.MODELS, default=S)
    sp.add_argument("--init", choices=pipeline.INITS, default=S)
    sp.add_argument("--m0", type=int, default=S, help="seed tasks for learned embeddings")
    sp.add_argument("--epochs", type=int, default=S)
    sp.add_argument("--batch-size", type=int, default=S)
    sp.add_argument("--lr", type=float, default=S)
    sp.add_argument("--optimizer", choices=("adam", "sgd"), default=S)
    sp.add_argument("--embed-dim", type=int, default=S)
    sp.add_argument("--steps-per-epoch", type=int, default=S)
    sp.add_argument("--val-fraction", type=float, default=S)

    sp = sub.add_parser("eval", help="evaluate a checkpoint")
    common(sp)
    sp.add_argument("--checkpoint", default=S, help="model.npz or the train output directory")
    sp.add_argument("--benchmark", default=S)
    sp.add_argument("--generalize", action="store_true", default=S)
    sp.add_argument("--test-benchmark", default=S)
    sp.add_argument("--emit-similarity", action="store_true", default=S)
    sp.add_argument("--experiment", default=S, help="name used in the report file name")

    sp = sub.add_parser("verify", help="run the numerical oracles")
    common(sp)
    sp.add_argument("--oracle", choices=("all",) + ORACLES, default=S)
    sp.add_argument("--trials", type=int, default=S)
    return p


_HANDLERS = {"synth": cmd_synth, "ingest": cmd_ingest, "train": cmd_train, "eval": cmd_eval,
             "verify": cmd_verify}


def main(argv=None) -> int:
    ns = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(ns.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    command = ns.command
    del ns.log_level
    try:
        cfg = resolve(command, ns)
        return _HANDLERS[command](cfg)
    except (DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingError as exc:
        print(f"training error: {exc}", file=sys.stderr)
        return EXIT_TRAINING
    except ValidationError as exc:
        code = EXIT_CONFIG if exc.kind == "config" else EXIT_DATA
        print(f"{'config' if code == EXIT_CONFIG else 'data'} error: {exc}", file=sys.stderr)
        return code
    except ValueError as exc:
        # remaining value checks live in the numerical layers (dropout lengths, optimizer settings)
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
