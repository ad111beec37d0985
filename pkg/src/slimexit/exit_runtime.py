"""Entropy-gated dynamic inference and accuracy-vs-compute sweeps.

An instance runs layer by layer (batch size 1); at each layer that owns a
classifier the prediction entropy is measured and the instance leaves the
network at the first layer where it falls to the threshold or below.
Thresholds are in nats.  `threshold=None` is the never-exit-early
sentinel: gates are skipped entirely and the instance always runs to the
final classifier, reproducing the static forward pass bit for bit.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .model import _embed, _encoder_layer, _exit_logits, count_flops


def entropy(p) -> float:
    """Shannon entropy -sum(p ln p) in nats, with 0 ln 0 = 0."""
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1:
        raise ValueError(f"expected a probability vector, got shape {p.shape}")
    if p.min() < 0.0 or abs(p.sum() - 1.0) > 1e-9:
        raise ValueError("not a probability distribution "
                         f"(min {p.min():.3g}, sum {p.sum():.12g})")
    terms = np.where(p > 0.0, p * np.log(np.where(p > 0.0, p, 1.0)), 0.0)
    return float(-terms.sum())


def _softmax_row(z):
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


@dataclass
class ExitPolicy:
    """`threshold` in nats; None means never exit before `max_layer`."""
    threshold: Optional[float]
    max_layer: Optional[int] = None

    def __post_init__(self):
        if self.threshold is not None and not self.threshold >= 0.0:
            raise ValueError(f"threshold must be >= 0, got {self.threshold}")
        if self.max_layer is not None and self.max_layer < 1:
            raise ValueError("max_layer must be >= 1")


@dataclass
class TraceEntry:
    exit_layer: int
    entropy: float
    prediction: int
    flops: int
    logits: np.ndarray


@dataclass
class ExitTrace:
    """Per-instance entries plus dataset-level aggregates."""
    entries: list
    accuracy: float
    mean_exit_layer: float
    mean_flops: float
    n_instances: int


def run_dynamic(model, ids, mask, policy: ExitPolicy):
    """One instance through the gated network; returns (prediction, entry).

    `ids` and `mask` are one-dimensional token rows.  The computation is
    the same per-layer code the static forward pass uses, so a sentinel
    policy reproduces its final logits exactly.  The entry's FLOPs count
    is the static cost of running to the recorded exit layer.
    """
    ids = np.asarray(ids, dtype=np.int64)
    mask = np.asarray(mask)
    if ids.ndim != 1 or mask.shape != ids.shape:
        raise ValueError("run_dynamic takes a single instance (1-d ids/mask)")
    ids2, mask2 = ids[None, :], mask[None, :]
    last = policy.max_layer if policy.max_layer is not None else model.num_layers
    gates = [k for k in sorted(model.exits) if k <= last]
    if not gates:
        raise ValueError(f"no exit at or before layer {last}")
    keep = (mask2 != 0)[:, None, :]

    h = _embed(model, ids2, mask2)
    for k in range(1, gates[-1] + 1):
        h = _encoder_layer(model.layers[k - 1], h, keep)
        if k not in model.exits or k > last:
            continue
        if policy.threshold is None and k < gates[-1]:
            continue
        logits = _exit_logits(model.exits[k], h).value[0]
        gate_entropy = entropy(_softmax_row(logits))
        if k == gates[-1] or (policy.threshold is not None
                              and gate_entropy <= policy.threshold):
            pred = int(np.argmax(logits))
            flops = count_flops(model, ids.shape[0], k)["to_exit"]
            return pred, TraceEntry(exit_layer=k, entropy=gate_entropy,
                                    prediction=pred, flops=flops,
                                    logits=logits)
    raise AssertionError("unreachable: final gate always exits")


def run_dataset(model, dataset, policy: ExitPolicy) -> ExitTrace:
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    entries = []
    for i in range(len(dataset)):
        ids = dataset.ids[i]
        _, entry = run_dynamic(model, ids, (ids != 0).astype(np.int64), policy)
        entries.append(entry)
    preds = np.array([e.prediction for e in entries])
    return ExitTrace(
        entries=entries,
        accuracy=float((preds == np.asarray(dataset.labels)).mean()),
        mean_exit_layer=float(np.mean([e.exit_layer for e in entries])),
        mean_flops=float(np.mean([e.flops for e in entries])),
        n_instances=len(entries))


def pareto_sweep(model, dataset, thresholds, csv_path=None):
    """One (H_T, accuracy, mean_flops, mean_exit_layer, n) record per
    threshold, ascending; optionally written as CSV."""
    thresholds = [float(t) for t in thresholds]
    if not thresholds:
        raise ValueError("no thresholds given")
    if any(b < a for a, b in zip(thresholds, thresholds[1:])):
        raise ValueError("thresholds must be sorted ascending")
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    records = []
    for t in thresholds:
        trace = run_dataset(model, dataset, ExitPolicy(threshold=t))
        records.append({"h_t": t, "accuracy": trace.accuracy,
                        "mean_flops": trace.mean_flops,
                        "mean_exit_layer": trace.mean_exit_layer,
                        "n_instances": trace.n_instances})
    if csv_path is not None:
        with open(csv_path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(records[0]))
            writer.writeheader()
            writer.writerows(records)
    return records


def split_simple_instances(dataset):
    """(strictly below median non-padding length, the rest)."""
    lengths = dataset.lengths()
    median = float(np.median(lengths))
    simple = np.flatnonzero(lengths < median)
    rest = np.flatnonzero(lengths >= median)
    return dataset.subset(simple), dataset.subset(rest)
