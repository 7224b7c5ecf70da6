"""Exposure-log ingestion and file formats.

Input formats (headered CSV):

* events: ``user_id,item_id``: one binary exposure per row.
* users:  ``user_id,label:<key1>,...,f_0,...,f_{d-1}``: dense features
  plus any number of categorical labels.

A benchmark directory written by :func:`write_benchmark` holds

* ``benchmark.json``: task names, weights, active sets, metadata;
* ``users.csv``:      ``user_id,label:category,f_0..`` for every row used;
* ``events.csv``:     training exposures ``user_id,item_id``;
* ``tasks/task_NNNN.csv``: ``user_id,role`` with role in
  ``train | nominal | anomalous``.
"""

from __future__ import annotations

import csv
import json
import math
import os
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .core import Benchmark, DataError, TaskCollection, ValidationError


@dataclass
class EventLog:
    events: list  # (user_id, item_id), deduplicated, first-seen order

    def __len__(self):
        return len(self.events)

    def exposures(self) -> dict:
        by_item = defaultdict(list)
        for u, i in self.events:
            by_item[i].append(u)
        return dict(by_item)


@dataclass
class UserTable:
    ids: list
    features: np.ndarray
    labels: dict = field(default_factory=dict)  # key -> int array aligned with ids
    label_values: dict = field(default_factory=dict)  # key -> original values by category id

    def __post_init__(self):
        self.index = {u: i for i, u in enumerate(self.ids)}

    def __len__(self):
        return len(self.ids)

    @property
    def feature_dim(self):
        return self.features.shape[1]

    def rows(self, user_ids) -> np.ndarray:
        return self.features[[self.index[u] for u in user_ids]]

    def label_of(self, key: str, user_ids) -> np.ndarray:
        if key not in self.labels:
            raise DataError(f"unknown label {key!r}; have {sorted(self.labels)}")
        return self.labels[key][[self.index[u] for u in user_ids]]

    def arity(self, key: str) -> int:
        return len(self.label_values[key])


def _category_order(values):
    def key(v):
        try:
            return (0, float(v), v)
        except ValueError:
            return (1, 0.0, v)

    return sorted(set(values), key=key)


def read_users(path) -> UserTable:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file")
        if not header or header[0] != "user_id":
            raise DataError(f"{path}:1: first column must be user_id")
        lab_cols = [(i, h[len("label:"):]) for i, h in enumerate(header) if h.startswith("label:")]
        feat_cols = [i for i, h in enumerate(header) if h.startswith("f_")]
        if not feat_cols:
            raise DataError(f"{path}:1: no feature columns f_0..")
        ids, feats, raw = [], [], {k: [] for _, k in lab_cols}
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                feats.append([float(row[i]) for i in feat_cols])
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: bad feature value ({exc})")
            ids.append(row[0])
            for i, k in lab_cols:
                raw[k].append(row[i])
    if len(set(ids)) != len(ids):
        dup = [u for u, c in Counter(ids).items() if c > 1][:5]
        raise DataError(f"{path}: duplicate user ids {dup}")
    X = np.array(feats, dtype=np.float64).reshape(len(ids), len(feat_cols))
    if not np.all(np.isfinite(X)):
        raise DataError(f"{path}: non-finite feature values")
    labels, values = {}, {}
    for k, vals in raw.items():
        order = _category_order(vals)
        code = {v: c for c, v in enumerate(order)}
        labels[k] = np.array([code[v] for v in vals], dtype=np.int64)
        values[k] = order
    return UserTable(ids, X, labels, values)


def read_events(path) -> EventLog:
    seen, events = set(), []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or header[:2] != ["user_id", "item_id"]:
            raise DataError(f"{path}:1: header must be user_id,item_id")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 2:
                raise DataError(f"{path}:{lineno}: expected 2 fields, got {len(row)}")
            pair = (row[0], row[1])
            if pair not in seen:
                seen.add(pair)
                events.append(pair)
    return EventLog(events)


def load(events_path, users_path) -> tuple[EventLog, UserTable]:
    users = read_users(users_path)
    log = read_events(events_path)
    missing = sorted({u for u, _ in log.events if u not in users.index})
    if missing:
        raise DataError(f"events reference unknown users: {missing[:10]}" + (" ..." if len(missing) > 10 else ""))
    return log, users


def split_users(users, ratio: float, rng: np.random.Generator) -> tuple[list, list]:
    """Seeded disjoint split; the train side gets ``round(ratio * n)`` users."""
    if not 0.0 < ratio < 1.0:
        raise ValidationError("config", "train ratio must lie in (0, 1)")
    ids = list(users.ids if isinstance(users, UserTable) else users)
    perm = rng.permutation(len(ids))
    n_train = int(round(ratio * len(ids)))
    return [ids[i] for i in sorted(perm[:n_train])], [ids[i] for i in sorted(perm[n_train:])]


def label_entropy(counts) -> float:
    c = np.asarray([v for v in counts if v > 0], dtype=np.float64)
    p = c / c.sum()
    return float(-(p * np.log(p)).sum())


def filter_tasks(log: EventLog, users: UserTable, min_exposures: int = 100, keep_fraction: float = 0.5,
                 label_key: str = "age") -> list:
    """Items with enough exposures and the most peaked label histograms.

    Returns the kept item ids sorted ascending.
    """
    if min_exposures < 1 or not 0.0 < keep_fraction <= 1.0:
        raise ValidationError("config", "need min_exposures >= 1 and 0 < keep_fraction <= 1")
    exp = log.exposures()
    survivors = sorted(i for i, us in exp.items() if len(us) >= min_exposures)
    if not survivors:
        raise DataError(f"no item has at least {min_exposures} exposures")
    ranked = sorted(
        survivors,
        key=lambda i: (label_entropy(Counter(users.label_of(label_key, exp[i]).tolist()).values()), i),
    )
    keep = int(math.floor(keep_fraction * len(ranked)))
    if keep < 1:
        raise DataError("keep_fraction retains no items")
    return sorted(ranked[:keep])


def label_task(log: EventLog, users: UserTable, item, label_key: str = "age") -> tuple[int, int]:
    """(most frequent, least frequent present) label category among the item's users."""
    us = log.exposures().get(item)
    if not us:
        raise DataError(f"item {item!r} has no exposures")
    counts = Counter(users.label_of(label_key, us).tolist())
    if len(counts) < 2:
        raise DataError(f"item {item!r}: no anomalous class (single label category present)")
    cats = sorted(counts)
    nominal = min(cats, key=lambda c: (-counts[c], c))
    anomalous = min((c for c in cats if c != nominal), key=lambda c: (counts[c], c))
    return nominal, anomalous


def build_collection(log: EventLog, users: UserTable, retained: Sequence, train_ids,
                     label_key: Optional[str] = None) -> TaskCollection:
    """One task per retained item holding the features of its exposed train users."""
    train = set(train_ids)
    exp = log.exposures()
    samples, labels = [], []
    for t, item in enumerate(retained):
        us = [u for u in exp.get(item, []) if u in train]
        if not us:
            raise ValidationError("empty-task", f"item {item!r} has no training exposures", t)
        samples.append(users.rows(us))
        labels.append(users.label_of(label_key, us) if label_key else None)
    return TaskCollection.from_samples(samples, labels=labels if label_key else None)


def benchmark_from_logs(log: EventLog, users: UserTable, min_exposures=100, keep_fraction=0.5,
                        label_key="age", split_seed=0, train_ratio=0.8) -> Benchmark:
    """Full ingestion: split users, filter items, label and build tasks.

    Test sets are the item's exposed test users carrying its nominal or
    anomalous label.  Items with no training exposures or only one label
    category are dropped and listed in ``meta['dropped']``.
    """
    rng = np.random.default_rng(split_seed)
    train_ids, test_ids = split_users(users, train_ratio, rng)
    train_set, test_set = set(train_ids), set(test_ids)
    kept = filter_tasks(log, users, min_exposures, keep_fraction, label_key)
    exp = log.exposures()
    items, nominal, anomalous, dropped = [], [], [], {}
    for item in kept:
        if not any(u in train_set for u in exp[item]):
            dropped[item] = "no training exposures"
            continue
        try:
            nom, ano = label_task(log, users, item, label_key)
        except DataError:
            dropped[item] = "no anomalous class"
            continue
        test_us = [u for u in exp[item] if u in test_set]
        lab = users.label_of(label_key, test_us) if test_us else np.array([], dtype=np.int64)
        nominal.append(users.rows([u for u, l in zip(test_us, lab) if l == nom]).reshape(-1, users.feature_dim))
        anomalous.append(users.rows([u for u, l in zip(test_us, lab) if l == ano]).reshape(-1, users.feature_dim))
        items.append(item)
    if not items:
        raise DataError("no usable items remain after filtering")
    train = build_collection(log, users, items, train_ids, label_key)
    meta = {"kind": "ingest", "label": label_key, "min_exposures": min_exposures,
            "keep_fraction": keep_fraction, "split_seed": split_seed, "dropped": dropped,
            "label_values": [str(v) for v in users.label_values[label_key]]}
    return Benchmark(train, nominal, anomalous, names=[str(i) for i in items], active=None,
                     label_arity=users.arity(label_key), meta=meta)


# -- serialisation -----------------------------------------------------------


def _fmt(v) -> str:
    return repr(float(v))


def write_collection(c: TaskCollection, path):
    """Single CSV ``task_id,weight,label,f_0..``; floats written with repr."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["task_id", "weight", "label"] + [f"f_{j}" for j in range(c.feature_dim)])
        for t in c.tasks:
            for i, row in enumerate(t.samples):
                lab = "" if t.labels is None else str(int(t.labels[i]))
                w.writerow([t.task_id, _fmt(t.weight), lab] + [_fmt(v) for v in row])


def read_collection(path) -> TaskCollection:
    rows = defaultdict(list)
    labs = defaultdict(list)
    weights = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        for lineno, row in enumerate(reader, start=2):
            try:
                t = int(row[0])
                weights[t] = float(row[1])
                labs[t].append(None if row[2] == "" else int(row[2]))
                rows[t].append([float(v) for v in row[3:]])
            except (ValueError, IndexError) as exc:
                raise DataError(f"{path}:{lineno}: {exc}")
    ids = sorted(rows)
    if ids != list(range(len(ids))):
        raise DataError(f"{path}: task ids must be dense 0..M-1")
    labels = [None if any(l is None for l in labs[t]) else np.array(labs[t]) for t in ids]
    return TaskCollection.from_samples([np.array(rows[t]) for t in ids], labels=labels,
                                       weights=[weights[t] for t in ids])


def write_embeddings(path, table: np.ndarray):
    table = np.atleast_2d(table)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["task_id"] + [f"e_{j + 1}" for j in range(table.shape[1])])
        for t, row in enumerate(table):
            w.writerow([t] + [_fmt(v) for v in row])


def read_embeddings(path) -> np.ndarray:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        rows = [(int(r[0]), [float(v) for v in r[1:]]) for r in reader if r]
    rows.sort()
    return np.array([r for _, r in rows], dtype=np.float64)


def write_benchmark(b: Benchmark, out_dir, test_labels: Optional[np.ndarray] = None,
                    test_X: Optional[np.ndarray] = None):
    """Write ``b`` as a benchmark directory (see module docstring).

    Rows are deduplicated by exact content so shared test pools are stored
    once.  ``test_X``/``test_labels`` optionally supply category labels for
    test rows.
    """
    os.makedirs(os.path.join(out_dir, "tasks"), exist_ok=True)
    ids: dict = {}
    users: list = []

    def uid(row, label):
        key = np.ascontiguousarray(row).tobytes()
        if key not in ids:
            ids[key] = f"u{len(ids):07d}"
            users.append((ids[key], row, label))
        return ids[key]

    test_lab = {}
    if test_X is not None and test_labels is not None:
        test_lab = {np.ascontiguousarray(r).tobytes(): int(l) for r, l in zip(test_X, test_labels)}

    task_rows, events = [], []
    for t in b.train.tasks:
        rows = []
        for i, x in enumerate(t.samples):
            u = uid(x, None if t.labels is None else int(t.labels[i]))
            rows.append((u, "train"))
            events.append((u, b.names[t.task_id]))
        for role, mats in (("nominal", b.test_nominal), ("anomalous", b.test_anomalous)):
            for x in mats[t.task_id]:
                rows.append((uid(x, test_lab.get(np.ascontiguousarray(x).tobytes())), role))
        task_rows.append(rows)

    d = b.train.feature_dim
    with open(os.path.join(out_dir, "users.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["user_id", "label:category"] + [f"f_{j}" for j in range(d)])
        for u, row, lab in users:
            w.writerow([u, "" if lab is None else lab] + [_fmt(v) for v in row])
    with open(os.path.join(out_dir, "events.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["user_id", "item_id"])
        w.writerows(events)
    for t, rows in enumerate(task_rows):
        with open(os.path.join(out_dir, "tasks", f"task_{t:04d}.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["user_id", "role"])
            w.writerows(rows)
    doc = {
        "feature_dim": d,
        "num_tasks": b.num_tasks,
        "names": list(b.names),
        "weights": [float(x) for x in b.train.weights],
        "active": None if b.active is None else [list(map(int, a)) for a in b.active],
        "label_arity": b.label_arity,
        "meta": b.meta,
    }
    with open(os.path.join(out_dir, "benchmark.json"), "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_benchmark(path) -> Benchmark:
    try:
        with open(os.path.join(path, "benchmark.json")) as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise DataError(f"{path}: not a benchmark directory (benchmark.json missing)")
    users: dict = {}
    upath = os.path.join(path, "users.csv")
    with open(upath, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        for lineno, row in enumerate(reader, start=2):
            try:
                users[row[0]] = (np.array([float(v) for v in row[2:]]), None if row[1] == "" else int(row[1]))
            except (ValueError, IndexError) as exc:
                raise DataError(f"{upath}:{lineno}: {exc}")
    d = doc["feature_dim"]
    samples, labels, nominal, anomalous = [], [], [], []
    for t in range(doc["num_tasks"]):
        tpath = os.path.join(path, "tasks", f"task_{t:04d}.csv")
        parts = {"train": [], "nominal": [], "anomalous": []}
        with open(tpath, newline="") as fh:
            reader = csv.reader(fh)
            next(reader)
            for lineno, row in enumerate(reader, start=2):
                if not row:
                    continue
                if row[0] not in users or row[1] not in parts:
                    raise DataError(f"{tpath}:{lineno}: unknown user or role {row}")
                parts[row[1]].append(row[0])
        samples.append(np.array([users[u][0] for u in parts["train"]]).reshape(-1, d))
        labs = [users[u][1] for u in parts["train"]]
        labels.append(None if any(l is None for l in labs) else np.array(labs, dtype=np.int64))
        nominal.append(np.array([users[u][0] for u in parts["nominal"]]).reshape(-1, d))
        anomalous.append(np.array([users[u][0] for u in parts["anomalous"]]).reshape(-1, d))
    use_labels = all(l is not None for l in labels)
    train = TaskCollection.from_samples(samples, labels=labels if use_labels else None, weights=doc["weights"])
    active = None if doc["active"] is None else [tuple(a) for a in doc["active"]]
    return Benchmark(train, nominal, anomalous, names=doc["names"], active=active,
                     label_arity=doc["label_arity"], meta=doc["meta"])
