"""Deterministic synthetic sequence classification tasks.

Three task kinds with graded difficulty over a shared token layout:

    KEYWORD   label 1 iff the trigger token (id 2) occurs (local evidence)
    MAJORITY  label = which of tokens 2 / 3 occurs more often (never tied)
    ORDER     exactly one 2 and one 3; label 1 iff the 2 comes first

Id 0 is padding, id 1 is the first-position marker every sequence starts
with, ids 2 and 3 are task markers, everything from 4 up is filler.  The
three kinds occupy disjoint input spaces (KEYWORD never contains a 3,
MAJORITY never has equal marker counts, ORDER has exactly one of each), so
one model can train on a mixture without label conflicts.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict
from pathlib import Path
import json

import numpy as np

PAD_ID = 0
CLS_ID = 1
MARK_A = 2  # KEYWORD trigger; MAJORITY/ORDER first marker
MARK_B = 3
FILLER_START = 4

KINDS = ("KEYWORD", "MAJORITY", "ORDER")


@dataclass
class TaskSpec:
    kind: str
    vocab_size: int = 64
    min_length: int = 4
    max_length: int = 32
    num_classes: int = 2
    balance: float = 0.5
    seed: int = 0
    train_size: int = 2048
    dev_size: int = 512

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown task kind {self.kind!r}; one of {KINDS}")
        if self.vocab_size < FILLER_START + 1:
            raise ValueError(
                f"vocab_size {self.vocab_size} too small: need pad, marker, "
                f"two task tokens and at least one filler id")
        if self.num_classes != 2:
            raise ValueError("these tasks are binary; num_classes must be 2")
        floor = 3 if self.kind == "MAJORITY" else 2
        if not floor <= self.min_length <= self.max_length:
            raise ValueError(f"need {floor} <= min_length <= max_length for "
                             f"{self.kind}")
        if not 0.0 < self.balance < 1.0:
            raise ValueError("balance must be strictly between 0 and 1")
        if self.train_size < 1 or self.dev_size < 1:
            raise ValueError("split sizes must be >= 1")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        extra = set(d) - set(cls.__dataclass_fields__)
        if extra:
            raise ValueError(f"unknown TaskSpec keys: {sorted(extra)}")
        return cls(**d)


@dataclass
class Dataset:
    """Fixed-width id matrix (pad 0), labels, and per-instance tags."""
    ids: np.ndarray
    labels: np.ndarray
    tags: list

    def __len__(self):
        return len(self.labels)

    def lengths(self):
        return (self.ids != PAD_ID).sum(axis=1)

    def subset(self, idx):
        idx = np.asarray(idx)
        return Dataset(self.ids[idx], self.labels[idx],
                       [self.tags[i] for i in idx])

    def batches(self, batch_size, rng=None):
        order = (np.arange(len(self)) if rng is None
                 else rng.permutation(len(self)))
        for at in range(0, len(order), batch_size):
            take = order[at:at + batch_size]
            yield self.ids[take], (self.ids[take] != PAD_ID).astype(np.int64), \
                self.labels[take]


@dataclass
class TaskData:
    spec: TaskSpec
    train: Dataset
    dev: Dataset


def _body(rng, spec, label):
    n = int(rng.integers(spec.min_length, spec.max_length + 1))
    filler = rng.integers(FILLER_START, spec.vocab_size, size=n)
    if spec.kind == "KEYWORD":
        if label:
            hits = int(rng.integers(1, max(2, n // 4 + 1)))
            at = rng.choice(n, size=hits, replace=False)
            filler[at] = MARK_A
        return filler
    if spec.kind == "MAJORITY":
        low = int(rng.integers(1, (n - 1) // 2 + 1))
        high = int(rng.integers(low + 1, n - low + 1))
        win, lose = (MARK_A, MARK_B) if label else (MARK_B, MARK_A)
        marks = np.concatenate([np.full(high, win), np.full(low, lose)])
        at = rng.choice(n, size=high + low, replace=False)
        filler[at] = marks
        return filler
    # ORDER: exactly one of each marker
    i, j = np.sort(rng.choice(n, size=2, replace=False))
    filler[i], filler[j] = (MARK_A, MARK_B) if label else (MARK_B, MARK_A)
    return filler


def _render(body, width):
    row = np.full(width, PAD_ID, dtype=np.int64)
    row[0] = CLS_ID
    row[1:1 + len(body)] = body
    return row


def _make_split(spec, rng, count, forbidden):
    n_pos = int(round(spec.balance * count))
    labels = np.zeros(count, dtype=np.int64)
    labels[:n_pos] = 1
    labels = rng.permutation(labels)
    width = spec.max_length + 1
    rows, tags = [], []
    for label in labels:
        for _ in range(1000):
            row = _render(_body(rng, spec, int(label)), width)
            key = row.tobytes()
            if key not in forbidden:
                forbidden.add(key)
                break
        else:
            raise RuntimeError(f"cannot draw a fresh {spec.kind} instance; "
                               f"spec space too small for requested sizes")
        rows.append(row)
        tags.append(f"{spec.kind}:{int((row != PAD_ID).sum())}")
    return Dataset(np.stack(rows), labels, tags)


def generate(spec: TaskSpec) -> TaskData:
    """Both splits, bit-reproducible from the TaskSpec; splits never overlap."""
    seen = set()
    train = _make_split(spec, np.random.default_rng([spec.seed, 0]),
                        spec.train_size, seen)
    dev = _make_split(spec, np.random.default_rng([spec.seed, 1]),
                      spec.dev_size, seen)
    return TaskData(spec, train, dev)


def mixed_eval_set(specs, seed) -> Dataset:
    """Seeded interleave of the dev splits of several compatible specs.

    With a single spec the result is exactly that spec's dev split.
    """
    if not specs:
        raise ValueError("need at least one spec")
    if len({s.vocab_size for s in specs}) != 1 or \
            len({s.num_classes for s in specs}) != 1:
        raise ValueError("mixed specs must share vocab_size and num_classes")
    devs = [generate(s).dev for s in specs]
    width = max(d.ids.shape[1] for d in devs)
    pools = []
    for d in devs:
        ids = np.full((len(d), width), PAD_ID, dtype=np.int64)
        ids[:, :d.ids.shape[1]] = d.ids
        pools.append(Dataset(ids, d.labels, list(d.tags)))
    rng = np.random.default_rng(seed)
    cursors = [0] * len(pools)
    rows, labels, tags = [], [], []
    while True:
        open_pools = [i for i, d in enumerate(pools) if cursors[i] < len(d)]
        if not open_pools:
            break
        pick = open_pools[int(rng.integers(len(open_pools)))]
        d, at = pools[pick], cursors[pick]
        rows.append(d.ids[at])
        labels.append(d.labels[at])
        tags.append(d.tags[at])
        cursors[pick] += 1
    return Dataset(np.stack(rows), np.asarray(labels, dtype=np.int64), tags)


def save_dataset(ds: Dataset, path, header: dict | None = None):
    """Header line of JSON, then one `ids<TAB>label<TAB>tag` row per line."""
    path = Path(path)
    head = {"count": len(ds), "width": int(ds.ids.shape[1])}
    if header:
        head.update(header)
    lines = [json.dumps(head, sort_keys=True)]
    for row, label, tag in zip(ds.ids, ds.labels, ds.tags):
        lines.append(f"{' '.join(map(str, row))}\t{int(label)}\t{tag}")
    path.write_text("\n".join(lines) + "\n")
    return path


def load_dataset(path) -> Dataset:
    lines = Path(path).read_text().strip().split("\n")
    head = json.loads(lines[0])
    if len(lines) - 1 != head["count"]:
        raise ValueError(f"dataset file lists {head['count']} rows but has "
                         f"{len(lines) - 1}")
    rows, labels, tags = [], [], []
    for line in lines[1:]:
        ids, label, tag = line.split("\t")
        rows.append(np.array(ids.split(), dtype=np.int64))
        labels.append(int(label))
        tags.append(tag)
    return Dataset(np.stack(rows), np.array(labels, dtype=np.int64), tags)
