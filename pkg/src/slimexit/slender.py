"""Structured width reduction: head/channel scoring, pruning, factorization.

Importance of a structure is the absolute first-order Taylor term
|sum(grad * weight)| over the structure's parameters, accumulated as one
absolute value per calibration batch and summed.  Scores use the plain sum
of exit losses (no per-depth gradient rescaling): the rescaling stabilizes
training, while importance measures total contribution to the loss.

Pruning physically removes rows and columns.  Hidden size, exits,
layer-norms and the position/type embeddings are never touched.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor
from .distill import (DistillPlan, _sample_batch, evaluate_exits,
                      hard_label_loss, recovery_train)
from .linalg import svd, truncate_factor
from .model import MultiExitModel, count_params, forward_all

HEAD = "attention-head"
CHANNEL = "ffn-channel"


@dataclass(frozen=True, order=True)
class StructureId:
    layer: int
    kind: str
    index: int

    def __post_init__(self):
        if self.kind not in (HEAD, CHANNEL):
            raise ValueError(f"unknown structure kind {self.kind!r}")


@dataclass
class StructureScore:
    structure: StructureId
    importance: float


@dataclass
class PruneSchedule:
    """Iterative shrink plan.

    Each iteration drops floor(drop_fraction * remaining) structures per
    kind, never dropping below the goal widths; validation simulates the
    arithmetic and rejects schedules that cannot land on the goal.
    `mode` is `uniform` (each layer shrinks to the same width, the default)
    or `global` (lowest-scoring structures across layers, per-kind totals).
    """
    iterations: int
    drop_fraction: float
    recovery_steps: int
    min_survivors: int = 1
    mode: str = "uniform"

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("need at least one iteration")
        if not 0.0 < self.drop_fraction < 1.0:
            raise ValueError("drop_fraction must be in (0, 1)")
        if self.recovery_steps < 0 or self.min_survivors < 1:
            raise ValueError("bad schedule sizes")
        if self.mode not in ("uniform", "global"):
            raise ValueError(f"unknown schedule mode {self.mode!r}")

    def to_dict(self):
        return {f: getattr(self, f) for f in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d):
        extra = set(d) - set(cls.__dataclass_fields__)
        if extra:
            raise ValueError(f"unknown PruneSchedule keys: {sorted(extra)}")
        return cls(**d)


def live_structures(model: MultiExitModel):
    out = []
    for li, layer in enumerate(model.layers, start=1):
        out += [StructureId(li, HEAD, hi) for hi in range(len(layer.heads))]
        out += [StructureId(li, CHANNEL, ci) for ci in range(layer.ffn_width)]
    return out


def _structure_tensors(model, sid: StructureId):
    layer = model.layers[sid.layer - 1]
    if sid.kind == HEAD:
        head = layer.heads[sid.index]
        return [(t, slice(None)) for t in head.tensors()]
    c = sid.index
    return [(layer.ffn_in_w, (slice(None), c)), (layer.ffn_in_b, (c,)),
            (layer.ffn_out_w, (c, slice(None)))]


def taylor_term(pairs):
    """Signed first-order term sum(grad * value) over (tensor, slice) pairs."""
    acc = 0.0
    for tensor, sl in pairs:
        if tensor.grad is None:
            continue
        acc += float(np.sum(tensor.grad[sl] * tensor.value[sl]))
    return acc


def score_structures(model, calib_batches, use_exit_losses=True):
    """One importance per live head and FFN channel.

    The loss is ground-truth cross-entropy at all exits (or at the final
    exit only when `use_exit_losses` is off), plain-summed; per batch the
    absolute Taylor term is taken, and batches accumulate by addition.
    """
    batches = list(calib_batches)
    if not batches:
        raise ValueError("calibration set is empty")
    sids = live_structures(model)
    totals = {sid: 0.0 for sid in sids}
    exit_order = (sorted(model.exits) if use_exit_losses
                  else [max(model.exits)])
    for ids, mask, labels in batches:
        model.zero_grad()
        rec = forward_all(model, ids, mask)
        loss = hard_label_loss([rec.exit_logits[k] for k in exit_order], labels)
        loss.backward()
        for sid in sids:
            totals[sid] += abs(taylor_term(_structure_tensors(model, sid)))
    model.zero_grad()
    return [StructureScore(sid, totals[sid]) for sid in sids]


def _counts(scores):
    live = {}
    for s in scores:
        key = (s.structure.layer, s.structure.kind)
        live[key] = live.get(key, 0) + 1
    return live


def select_prune_set(scores, drop_fraction, min_survivors=1):
    """Globally lowest-scoring structures per kind, floor(drop * live) many.

    A layer never goes below `min_survivors` per kind; ties break by
    (layer, index) ascending so runs are reproducible.
    """
    if not 0.0 < drop_fraction < 1.0:
        raise ValueError("drop_fraction must be in (0, 1)")
    live = _counts(scores)
    if min_survivors < 1 or (live and min_survivors > min(live.values())):
        raise ValueError(f"min_survivors {min_survivors} infeasible for "
                         f"current widths {live}")
    chosen = set()
    for kind in (HEAD, CHANNEL):
        pool = [s for s in scores if s.structure.kind == kind]
        want = int(np.floor(drop_fraction * len(pool)))
        pool.sort(key=lambda s: (s.importance, s.structure.layer,
                                 s.structure.index))
        remaining = {k: v for k, v in live.items() if k[1] == kind}
        for s in pool:
            if want == 0:
                break
            key = (s.structure.layer, kind)
            if remaining[key] <= min_survivors:
                continue
            chosen.add(s.structure)
            remaining[key] -= 1
            want -= 1
    return chosen


def select_to_widths(scores, targets):
    """Per-layer selection dropping each layer to `targets[(layer, kind)]`."""
    live = _counts(scores)
    chosen = set()
    for key, target in targets.items():
        have = live.get(key, 0)
        if target > have:
            raise ValueError(f"target {target} exceeds live count {have} "
                             f"for {key}")
        layer, kind = key
        pool = sorted((s for s in scores if s.structure.layer == layer
                       and s.structure.kind == kind),
                      key=lambda s: (s.importance, s.structure.index))
        for s in pool[:have - target]:
            chosen.add(s.structure)
    return chosen


def apply_prune(model, prune_set):
    """Return a physically smaller copy with the given structures removed."""
    prune_set = set(prune_set)
    if not prune_set:
        return model.clone()
    widths = dict(enumerate(model.layer_widths(), start=1))
    drops = {}
    for sid in prune_set:
        if sid.layer < 1 or sid.layer > model.num_layers:
            raise ValueError(f"no layer {sid.layer}")
        heads, ffn = widths[sid.layer]
        limit = heads if sid.kind == HEAD else ffn
        if not 0 <= sid.index < limit:
            raise ValueError(f"{sid} out of range (live {limit})")
        drops.setdefault((sid.layer, sid.kind), set()).add(sid.index)
    for (layer, kind), idx in drops.items():
        limit = widths[layer][0 if kind == HEAD else 1]
        if len(idx) >= limit:
            raise ValueError(f"refusing to remove every {kind} of layer {layer}")

    out = model.clone()
    for (li, kind), idx in drops.items():
        layer = out.layers[li - 1]
        if kind == HEAD:
            layer.heads = [h for i, h in enumerate(layer.heads)
                           if i not in idx]
        else:
            keep = [i for i in range(layer.ffn_width) if i not in idx]
            layer.ffn_in_w = Tensor(layer.ffn_in_w.value[:, keep])
            layer.ffn_in_b = Tensor(layer.ffn_in_b.value[keep])
            layer.ffn_out_w = Tensor(layer.ffn_out_w.value[keep, :])
    return out


def zeroed_copy(model, sid: StructureId):
    """Copy with one structure's weights set to zero (masking oracle)."""
    out = model.clone()
    for tensor, sl in _structure_tensors(out, sid):
        tensor.value[sl] = 0.0
    return out


def factorize_embedding(model, rank):
    """Replace the dense word table with its best rank-R factor pair."""
    if model.is_factorized:
        raise ValueError("word embedding is already factorized")
    vocab, hidden = model.word.shape
    if not 1 <= rank <= min(vocab, hidden):
        raise ValueError(f"rank {rank} outside [1, {min(vocab, hidden)}]")
    w1, w2 = truncate_factor(svd(model.word.value), rank)
    out = model.clone()
    out.word = None
    out.word_a = Tensor(w1)
    out.word_b = Tensor(w2)
    return out


def _simulate(start, goal, fraction, iterations):
    path, cur = [], start
    for _ in range(iterations):
        cur = max(goal, cur - int(np.floor(fraction * cur)))
        path.append(cur)
    return path


def plan_iteration_targets(model, goal, schedule):
    """Per-iteration width targets; raises if the schedule cannot reach goal.

    Uniform mode returns per-layer targets per iteration; global mode
    returns per-kind totals per iteration.
    """
    widths = model.layer_widths()
    if schedule.mode == "uniform":
        per_iter = []
        for kind, pick, target in ((HEAD, 0, goal.num_heads),
                                   (CHANNEL, 1, goal.ffn)):
            for li, w in enumerate(widths, start=1):
                path = _simulate(w[pick], target, schedule.drop_fraction,
                                 schedule.iterations)
                if path[-1] != target:
                    raise ValueError(
                        f"schedule cannot reach {kind} width {target} from "
                        f"{w[pick]} in {schedule.iterations} iterations")
                for t, value in enumerate(path):
                    while len(per_iter) <= t:
                        per_iter.append({})
                    per_iter[t][(li, kind)] = value
        return per_iter
    totals = {HEAD: sum(w[0] for w in widths),
              CHANNEL: sum(w[1] for w in widths)}
    goals = {HEAD: goal.num_heads * goal.layers,
             CHANNEL: goal.ffn * goal.layers}
    per_iter = [dict() for _ in range(schedule.iterations)]
    for kind in (HEAD, CHANNEL):
        path = _simulate(totals[kind], goals[kind], schedule.drop_fraction,
                         schedule.iterations)
        if path[-1] != goals[kind]:
            raise ValueError(f"schedule cannot reach {kind} total "
                             f"{goals[kind]} from {totals[kind]}")
        for t, value in enumerate(path):
            per_iter[t][kind] = value
    return per_iter


def _select_global(scores, kind_totals, min_survivors):
    live = _counts(scores)
    chosen = set()
    for kind, target in kind_totals.items():
        pool = sorted((s for s in scores if s.structure.kind == kind),
                      key=lambda s: (s.importance, s.structure.layer,
                                     s.structure.index))
        want = len(pool) - target
        remaining = {k: v for k, v in live.items() if k[1] == kind}
        for s in pool:
            if want <= 0:
                break
            key = (s.structure.layer, kind)
            if remaining[key] <= min_survivors:
                continue
            chosen.add(s.structure)
            remaining[key] -= 1
            want -= 1
        if want > 0:
            raise ValueError(f"min_survivors blocks reaching {kind} total "
                             f"{target}")
    return chosen


def _score_summary(scores):
    out = {}
    for kind in (HEAD, CHANNEL):
        vals = sorted(s.importance for s in scores if s.structure.kind == kind)
        if vals:
            out[kind] = {"min": vals[0], "median": vals[len(vals) // 2],
                         "max": vals[-1]}
    return out


def slenderize(ta, goal, schedule: PruneSchedule, data, plan: DistillPlan,
               rng, use_exit_losses=True, calib_batches=4, dev=None):
    """Iteratively shrink the assistant to the goal widths.

    Factorizes the word embedding first (when the goal asks for a rank and
    the assistant is dense), then alternates score / select / prune with
    `schedule.recovery_steps` of recovery distillation after each prune.
    Returns (model, report); the report lists per-iteration score
    summaries, dropped structures, parameter totals and exit accuracy.
    """
    if goal.layers != ta.num_layers:
        raise ValueError("goal depth differs from assistant depth")
    if goal.hidden != ta.config.hidden:
        raise ValueError("hidden size must stay intact")
    if goal.head_size != ta.head_size:
        raise ValueError("head size changes are not a width prune")
    for heads, ffn in ta.layer_widths():
        if goal.num_heads > heads or goal.ffn > ffn:
            raise ValueError("goal widths exceed assistant widths")

    start_widths = ta.layer_widths()
    at_goal = all(w == (goal.num_heads, goal.ffn) for w in start_widths)
    if at_goal and (goal.embed_rank is None or ta.is_factorized):
        return ta, {"iterations": [], "note": "goal equals current shape"}

    targets = plan_iteration_targets(ta, goal, schedule)
    report = {"iterations": [], "mode": schedule.mode}
    if schedule.iterations == 1 and not at_goal:
        report["note"] = "single drastic prune"

    current = ta
    if goal.embed_rank is not None and not current.is_factorized:
        current = factorize_embedding(current, goal.embed_rank)

    def calib():
        for _ in range(calib_batches):
            yield _sample_batch(data, min(plan.batch_size, len(data)), rng)

    for t, target in enumerate(targets, start=1):
        scores = score_structures(current, calib(),
                                  use_exit_losses=use_exit_losses)
        if schedule.mode == "uniform":
            chosen = select_to_widths(scores, target)
        else:
            chosen = _select_global(scores, target, schedule.min_survivors)
        before = count_params(current)["total"]
        current = apply_prune(current, chosen)
        after = count_params(current)["total"]
        if chosen:
            assert after < before
        if schedule.recovery_steps:
            step_plan = DistillPlan(**{**plan.to_dict(),
                                       "steps": schedule.recovery_steps})
            recovery_train(ta, current, data, step_plan, rng)
        entry = {"iteration": t,
                 "scores": _score_summary(scores),
                 "dropped": sorted((s.layer, s.kind, s.index) for s in chosen),
                 "params": after,
                 "widths": current.layer_widths()}
        if dev is not None:
            entry["exit_accuracy"] = {str(k): v for k, v in
                                      evaluate_exits(current, dev).items()}
        report["iterations"].append(entry)

    final = current.layer_widths()
    if schedule.mode == "uniform":
        assert all(w == (goal.num_heads, goal.ffn) for w in final)
    else:
        assert sum(w[0] for w in final) == goal.num_heads * goal.layers
        assert sum(w[1] for w in final) == goal.ffn * goal.layers
    return current, report
