"""Distillation losses and training loops.

Two uses: turning the single-exit teacher into a multi-exit assistant by
prediction distillation, and recovering a slimmed model from the assistant
with prediction plus hidden-state losses.  Per-depth gradient averaging is
on by default so shallow exits do not drown deep layers in conflicting
updates; it degenerates to a plain backward when only one loss is active.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .model import forward_all

TEMPERATURE_DEFAULT = 1.0


@dataclass
class DistillPlan:
    temperature: float = TEMPERATURE_DEFAULT
    enable_pred: bool = True
    enable_feat: bool = False
    gradient_equilibrium: bool = True
    learning_rate: float = 3e-4
    batch_size: int = 32
    steps: int = 400
    weight_decay: float = 0.01
    clip_norm: float = 1.0
    pred_weight: float = 1.0
    feat_weight: float = 1.0
    eval_interval: int = 100

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if not (self.enable_pred or self.enable_feat):
            raise ValueError("at least one distillation loss must be enabled")
        if self.steps < 0 or self.batch_size < 1:
            raise ValueError("bad optimizer sizes")

    def to_dict(self):
        return {f: getattr(self, f) for f in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d):
        extra = set(d) - set(cls.__dataclass_fields__)
        if extra:
            raise ValueError(f"unknown DistillPlan keys: {sorted(extra)}")
        return cls(**d)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def _soft_targets(logits_value, temperature):
    z = np.asarray(logits_value) / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def pred_distill_loss(teacher_logits, student_logits, temperature=1.0):
    """Sum over exits of soft cross-entropy, batch-averaged.

    `teacher_logits` are plain arrays (no gradient flows to the teacher);
    `student_logits` are graph tensors.
    """
    if len(teacher_logits) != len(student_logits):
        raise ValueError(f"{len(teacher_logits)} teacher vs "
                         f"{len(student_logits)} student logit sets")
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    total = None
    for zt, zs in zip(teacher_logits, student_logits):
        probs = Tensor(_soft_targets(zt, temperature), requires_grad=False)
        scaled = ad.scale(zs, 1.0 / temperature) if temperature != 1.0 else zs
        term = ad.soft_cross_entropy(probs, scaled)
        total = term if total is None else total + term
    return total


def feat_distill_loss(teacher_states, student_states):
    """Sum over states of elementwise MSE (batch and position averaged)."""
    if len(teacher_states) != len(student_states):
        raise ValueError(f"{len(teacher_states)} teacher vs "
                         f"{len(student_states)} student states")
    total = None
    for ht, hs in zip(teacher_states, student_states):
        target = Tensor(np.asarray(ht), requires_grad=False)
        term = ad.mean_squared_error(hs, target)
        total = term if total is None else total + term
    return total


def hard_label_loss(logits_list, labels):
    """Sum over exits of one-hot cross-entropy against integer labels."""
    labels = np.asarray(labels)
    total = None
    for z in logits_list:
        onehot = np.eye(z.shape[1])[labels]
        term = ad.soft_cross_entropy(Tensor(onehot, requires_grad=False), z)
        total = term if total is None else total + term
    return total


def gradient_equilibrium_rescale(exit_gradients):
    """Mean of the downstream-exit gradients for one layer's parameter.

    This is the reference semantics; the trainers realize the same thing
    in one backward pass through scale nodes in the forward graph.
    """
    grads = list(exit_gradients)
    if not grads:
        raise ValueError("no exit gradients supplied")
    if any(g is None for g in grads):
        raise ValueError("missing exit gradient")
    return np.mean([np.asarray(g, dtype=np.float64) for g in grads], axis=0)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

class AdamW:
    """Adam with decoupled weight decay on matrices only (ndim >= 2).

    Tensors whose grad is None at step time are skipped entirely, so
    frozen or unused parameters neither move nor decay.
    """

    def __init__(self, params, lr, weight_decay=0.01, betas=(0.9, 0.999),
                 eps=1e-8, clip_norm=1.0):
        self.params = list(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.clip_norm = clip_norm
        self.t = 0
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]

    def global_grad_norm(self):
        acc = 0.0
        for p in self.params:
            if p.grad is not None:
                acc += float(np.sum(p.grad * p.grad))
        return np.sqrt(acc)

    def step(self):
        self.t += 1
        clip = 1.0
        if self.clip_norm is not None:
            norm = self.global_grad_norm()
            if norm > self.clip_norm:
                clip = self.clip_norm / norm
        bc1 = 1.0 - self.b1 ** self.t
        bc2 = 1.0 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad * clip
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if self.weight_decay and p.value.ndim >= 2:
                update = update + self.weight_decay * p.value
            p.value = p.value - self.lr * update

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()


# ---------------------------------------------------------------------------
# training loops
# ---------------------------------------------------------------------------

def _sample_batch(data, batch_size, rng):
    n = len(data)
    take = (rng.choice(n, size=batch_size, replace=False)
            if batch_size <= n else rng.integers(0, n, size=batch_size))
    ids = data.ids[take]
    mask = (ids != 0).astype(np.int64)
    return ids, mask, data.labels[take]


def evaluate_exits(model, data, batch_size=64):
    """Static accuracy of every exit over a dataset."""
    hits = {k: 0 for k in model.exits}
    for ids, mask, labels in data.batches(batch_size):
        rec = forward_all(model, ids, mask)
        for k, z in rec.exit_logits.items():
            hits[k] += int(np.sum(np.argmax(z.value, axis=1) == labels))
    return {k: hits[k] / len(data) for k in sorted(hits)}


def _emit(metrics, record):
    if metrics is not None:
        metrics.append(record)


def _maybe_eval(model, data_dev, metrics, step, losses):
    if metrics is None or data_dev is None:
        return
    acc = evaluate_exits(model, data_dev)
    _emit(metrics, {"step": step,
                    "loss": {str(k): float(v) for k, v in losses.items()},
                    "accuracy": {str(k): float(v) for k, v in acc.items()}})


def _check_finite_loss(loss, step):
    if not np.isfinite(loss.value):
        raise FloatingPointError(f"training diverged at step {step}: "
                                 f"loss {loss.value!r}")


def train_supervised(model, data, plan: DistillPlan, rng, dev=None,
                     metrics=None):
    """Ground-truth cross-entropy at every exit the model has."""
    depths = set(model.exits)
    opt = AdamW(model.parameters(), plan.learning_rate, plan.weight_decay,
                clip_norm=plan.clip_norm)
    for step in range(1, plan.steps + 1):
        ids, mask, labels = _sample_batch(data, plan.batch_size, rng)
        rec = forward_all(model, ids, mask,
                          loss_depths=depths if plan.gradient_equilibrium
                          else None)
        logits = [rec.exit_logits[k] for k in sorted(rec.exit_logits)]
        loss = hard_label_loss(logits, labels)
        _check_finite_loss(loss, step)
        opt.zero_grad()
        loss.backward()
        opt.step()
        if step % plan.eval_interval == 0 or step == plan.steps:
            _maybe_eval(model, dev, metrics, step,
                        {"train": float(loss.value)})
    return model


def distill_ta(teacher, student, data, plan: DistillPlan, rng, dev=None,
               metrics=None):
    """Train every student exit against the teacher's final logits."""
    if teacher.num_layers != student.num_layers:
        raise ValueError(f"teacher depth {teacher.num_layers} != student "
                         f"depth {student.num_layers}")
    if not plan.enable_pred:
        raise ValueError("assistant creation distills predictions")
    final = max(teacher.exits)
    exit_order = sorted(student.exits)
    opt = AdamW(student.parameters(), plan.learning_rate, plan.weight_decay,
                clip_norm=plan.clip_norm)
    for step in range(1, plan.steps + 1):
        ids, mask, _ = _sample_batch(data, plan.batch_size, rng)
        t_logits = forward_all(teacher, ids, mask).exit_logits[final].value
        rec = forward_all(student, ids, mask,
                          loss_depths=set(exit_order)
                          if plan.gradient_equilibrium else None)
        loss = pred_distill_loss([t_logits] * len(exit_order),
                                 [rec.exit_logits[k] for k in exit_order],
                                 plan.temperature)
        _check_finite_loss(loss, step)
        opt.zero_grad()
        loss.backward()
        opt.step()
        if step % plan.eval_interval == 0 or step == plan.steps:
            _maybe_eval(student, dev, metrics, step,
                        {"pred": float(loss.value)})
    return student


def recovery_train(ta, student, data, plan: DistillPlan, rng, dev=None,
                   metrics=None):
    """Layer-wise distillation from the assistant into the slimmed model.

    With both losses enabled the ground-truth labels are never touched;
    disabling `enable_pred` swaps in ground-truth cross-entropy at every
    exit, disabling `enable_feat` drops the hidden-state terms.
    """
    if ta.num_layers != student.num_layers:
        raise ValueError("assistant and student depth differ")
    if ta.config.hidden != student.config.hidden:
        raise ValueError("hidden size must match for state distillation")
    exit_order = sorted(student.exits)
    if sorted(ta.exits) != exit_order:
        raise ValueError("assistant and student exits differ")
    depths = set(exit_order)
    if plan.enable_feat:
        # state losses attach at the embedding output and every layer
        depths |= set(range(ta.num_layers + 1))
    opt = AdamW(student.parameters(), plan.learning_rate, plan.weight_decay,
                clip_norm=plan.clip_norm)
    for step in range(1, plan.steps + 1):
        ids, mask, labels = _sample_batch(data, plan.batch_size, rng)
        if plan.enable_pred and plan.enable_feat:
            labels = None  # fully label-free path
        ta_rec = forward_all(ta, ids, mask)
        rec = forward_all(student, ids, mask,
                          loss_depths=depths if plan.gradient_equilibrium
                          else None)
        total = None
        report = {}
        if plan.enable_pred:
            pred = pred_distill_loss(
                [ta_rec.exit_logits[k].value for k in exit_order],
                [rec.exit_logits[k] for k in exit_order], plan.temperature)
            pred = ad.scale(pred, plan.pred_weight)
            total = pred
            report["pred"] = float(pred.value)
        else:
            hard = hard_label_loss([rec.exit_logits[k] for k in exit_order],
                                   labels)
            total = hard
            report["hard"] = float(hard.value)
        if plan.enable_feat:
            feat = feat_distill_loss([h.value for h in ta_rec.hiddens],
                                     rec.hiddens)
            feat = ad.scale(feat, plan.feat_weight)
            total = feat if total is None else total + feat
            report["feat"] = float(feat.value)
        _check_finite_loss(total, step)
        opt.zero_grad()
        total.backward()
        opt.step()
        if step % plan.eval_interval == 0 or step == plan.steps:
            _maybe_eval(student, dev, metrics, step, report)
    return student


def fit_exit_heads(ta, student, data, plan: DistillPlan, rng, layers=None,
                   dev=None, metrics=None):
    """Train only the chosen exit heads, backbone frozen.

    Used by the separately-trained baseline: backbone and final head are
    produced first, then shallow exits are fitted on top without moving
    anything below them.
    """
    if layers is None:
        layers = [k for k in sorted(student.exits) if k != max(student.exits)]
    layers = sorted(layers)
    head_params = []
    for k in layers:
        head_params += [student.exits[k].w, student.exits[k].b]
    frozen = [t for _, t in student.named_parameters()
              if all(t is not p for p in head_params)]
    saved = [t.requires_grad for t in frozen]
    for t in frozen:
        t.requires_grad = False
    try:
        opt = AdamW(head_params, plan.learning_rate, plan.weight_decay,
                    clip_norm=plan.clip_norm)
        for step in range(1, plan.steps + 1):
            ids, mask, labels = _sample_batch(data, plan.batch_size, rng)
            rec = forward_all(student, ids, mask)
            if plan.enable_pred:
                ta_rec = forward_all(ta, ids, mask)
                loss = pred_distill_loss(
                    [ta_rec.exit_logits[k].value for k in layers],
                    [rec.exit_logits[k] for k in layers], plan.temperature)
            else:
                loss = hard_label_loss([rec.exit_logits[k] for k in layers],
                                       labels)
            _check_finite_loss(loss, step)
            opt.zero_grad()
            loss.backward()
            opt.step()
            if step % plan.eval_interval == 0 or step == plan.steps:
                _maybe_eval(student, dev, metrics, step,
                            {"exit_fit": float(loss.value)})
    finally:
        for t, flag in zip(frozen, saved):
            t.requires_grad = flag
    return student


def metrics_to_jsonl(metrics) -> str:
    return "\n".join(json.dumps(m, sort_keys=True) for m in metrics) + "\n"
