"""End-to-end orchestration: teacher, assistant, width reduction, eval.

Stages are pure functions of (config, input checkpoints, seed) writing
self-describing artifacts: every checkpoint manifest embeds the hash of
the config slice that produced it, so re-runs skip stages whose inputs
have not changed and rebuild stages whose slice hash differs.

Randomness flows from one root seed through five named substreams
(data, teacher, ta, prune, recovery) so stages can be re-run in
isolation without perturbing each other.
"""

from __future__ import annotations

import json
import shutil
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .checkpoint import load_model, read_manifest, save_model, stable_hash
from .distill import (DistillPlan, distill_ta, evaluate_exits,
                      fit_exit_heads, metrics_to_jsonl, recovery_train,
                      train_supervised)
from .exit_runtime import ExitPolicy, pareto_sweep, run_dataset, \
    split_simple_instances
from .model import (ExitHead, ModelConfig, MultiExitModel, count_flops,
                    count_params, init_model, truncated_normal)
from .slender import PruneSchedule, slenderize
from .taskgen import PAD_ID, Dataset, TaskSpec, generate, mixed_eval_set

MODES = ("full", "two-stage", "no-exit-calibration", "no-pred", "no-feat")
STREAMS = ("data", "teacher", "ta", "prune", "recovery")


class PipelineError(RuntimeError):
    """A stage failed; the message names the stage."""


@dataclass
class PipelineConfig:
    tasks: list
    teacher: ModelConfig
    goal: ModelConfig
    teacher_plan: DistillPlan
    ta_plan: DistillPlan
    recovery_plan: DistillPlan
    schedule: PruneSchedule
    thresholds: list
    seeds: list
    out_dir: str
    ablation: str = "full"

    def __post_init__(self):
        if self.ablation not in MODES:
            raise ValueError(f"unknown ablation mode {self.ablation!r}; "
                             f"one of {MODES}")
        if not self.tasks:
            raise ValueError("need at least one task")
        kinds = [t["kind"] for t in self.tasks]
        if len(set(kinds)) != len(kinds):
            raise ValueError(f"duplicate task kinds: {kinds}")
        if not self.seeds:
            raise ValueError("need at least one seed")
        ts = [float(t) for t in self.thresholds]
        if not ts or any(b < a for a, b in zip(ts, ts[1:])):
            raise ValueError("thresholds must be non-empty, sorted ascending")
        t, g = self.teacher, self.goal
        if g.layers != t.layers:
            raise ValueError("goal must keep the teacher's depth")
        if g.hidden != t.hidden or g.head_size != t.head_size:
            raise ValueError("hidden size and head size stay intact")
        if g.num_heads > t.num_heads or g.ffn > t.ffn:
            raise ValueError("goal widths exceed teacher widths")
        if t.embed_rank is not None:
            raise ValueError("teacher embedding must be dense")
        if g.vocab_size != t.vocab_size:
            raise ValueError("goal and teacher vocabulary differ")
        for task in self.tasks:
            spec = TaskSpec(**{**task, "seed": 0})
            if spec.vocab_size != t.vocab_size:
                raise ValueError(f"task {spec.kind} vocab {spec.vocab_size} "
                                 f"!= model vocab {t.vocab_size}")
            if spec.max_length + 1 > t.max_positions:
                raise ValueError(f"task {spec.kind} sequences exceed "
                                 f"max_positions {t.max_positions}")
            if spec.num_classes != t.num_classes:
                raise ValueError("task and model class counts differ")

    def to_dict(self):
        return {"tasks": [dict(t) for t in self.tasks],
                "teacher": self.teacher.to_dict(),
                "goal": self.goal.to_dict(),
                "teacher_plan": self.teacher_plan.to_dict(),
                "ta_plan": self.ta_plan.to_dict(),
                "recovery_plan": self.recovery_plan.to_dict(),
                "schedule": self.schedule.to_dict(),
                "thresholds": [float(t) for t in self.thresholds],
                "seeds": [int(s) for s in self.seeds],
                "out_dir": self.out_dir,
                "ablation": self.ablation}

    @classmethod
    def from_dict(cls, d):
        known = {"tasks", "teacher", "goal", "teacher_plan", "ta_plan",
                 "recovery_plan", "schedule", "thresholds", "seeds",
                 "out_dir", "ablation"}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown config keys: {sorted(extra)}")
        missing = known - set(d) - {"ablation"}
        if missing:
            raise ValueError(f"missing config keys: {sorted(missing)}")
        return cls(tasks=list(d["tasks"]),
                   teacher=ModelConfig.from_dict(d["teacher"]),
                   goal=ModelConfig.from_dict(d["goal"]),
                   teacher_plan=DistillPlan.from_dict(d["teacher_plan"]),
                   ta_plan=DistillPlan.from_dict(d["ta_plan"]),
                   recovery_plan=DistillPlan.from_dict(d["recovery_plan"]),
                   schedule=PruneSchedule.from_dict(d["schedule"]),
                   thresholds=list(d["thresholds"]),
                   seeds=list(d["seeds"]),
                   out_dir=d["out_dir"],
                   ablation=d.get("ablation", "full"))

    @classmethod
    def from_json(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def stage_hash(self, stage: str) -> str:
        """Hash of the config slice a stage depends on.

        Teacher and assistant artifacts are shared by every ablation mode,
        so their slices exclude the ablation flag.
        """
        d = self.to_dict()
        slices = {
            "teacher": ["tasks", "teacher", "teacher_plan"],
            "ta": ["tasks", "teacher", "teacher_plan", "ta_plan"],
            "slender": ["tasks", "teacher", "teacher_plan", "ta_plan",
                        "goal", "schedule", "recovery_plan", "ablation"],
            "eval": ["tasks", "teacher", "teacher_plan", "ta_plan",
                     "goal", "schedule", "recovery_plan", "ablation",
                     "thresholds"],
        }
        if stage not in slices:
            raise ValueError(f"unknown stage {stage!r}")
        return stable_hash({k: d[k] for k in slices[stage]})


# ---------------------------------------------------------------------------
# seeds and data
# ---------------------------------------------------------------------------

def substreams(seed: int) -> dict:
    children = np.random.SeedSequence(int(seed)).spawn(len(STREAMS))
    return dict(zip(STREAMS, children))


def _state(ss) -> int:
    return int(ss.generate_state(1)[0])


@dataclass
class DataBundle:
    train: Dataset
    devs: dict
    mixed: Dataset
    specs: list = field(default_factory=list)


def _pad_to(ids, width):
    if ids.shape[1] == width:
        return ids
    out = np.full((ids.shape[0], width), PAD_ID, dtype=np.int64)
    out[:, :ids.shape[1]] = ids
    return out


def load_data(config: PipelineConfig, seed: int) -> DataBundle:
    ss = substreams(seed)["data"]
    data_seed = _state(ss)
    specs = [TaskSpec(**{**task, "seed": data_seed + i})
             for i, task in enumerate(config.tasks)]
    produced = [generate(s) for s in specs]
    width = max(d.train.ids.shape[1] for d in produced)
    ids = np.concatenate([_pad_to(d.train.ids, width) for d in produced])
    labels = np.concatenate([d.train.labels for d in produced])
    tags = [tag for d in produced for tag in d.train.tags]
    order = np.random.default_rng(ss).permutation(len(labels))
    train = Dataset(ids[order], labels[order], [tags[i] for i in order])
    devs = {s.kind: d.dev for s, d in zip(specs, produced)}
    mixed = mixed_eval_set(specs, data_seed)
    return DataBundle(train=train, devs=devs, mixed=mixed, specs=specs)


# ---------------------------------------------------------------------------
# artifact plumbing
# ---------------------------------------------------------------------------

def seed_dir(config: PipelineConfig, seed: int) -> Path:
    return Path(config.out_dir) / f"seed{seed}"


def mode_dir(config: PipelineConfig, seed: int) -> Path:
    """Teacher and assistant are ablation-independent and live in the seed
    directory; width reduction and eval artifacts are per-mode."""
    return seed_dir(config, seed) / config.ablation


def _stage_fresh(directory: Path, want_hash: str, seed: int) -> bool:
    """True when a usable checkpoint with the right config slice exists."""
    try:
        manifest = read_manifest(directory)
    except (FileNotFoundError, ValueError):
        return False
    return (manifest.get("stage_hash") == want_hash
            and manifest.get("seed") == seed)


def _write_metrics(directory: Path, metrics):
    (directory / "metrics.jsonl").write_text(metrics_to_jsonl(metrics)
                                             if metrics else "")


def _save_stage(model, directory: Path, *, stage, config, seed, extra=None):
    if directory.exists():
        shutil.rmtree(directory)
    directory.mkdir(parents=True)
    payload = {"stage": stage, "stage_hash": config.stage_hash(stage),
               "seed": seed}
    payload.update(extra or {})
    save_model(model, directory, extra=payload)


def _final_exit_accuracy(model, devs):
    final = max(model.exits)
    return {kind: evaluate_exits(model, dev)[final]
            for kind, dev in devs.items()}


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------

def train_teacher_stage(config: PipelineConfig, seed: int) -> Path:
    """Single-exit model trained on ground-truth labels."""
    out = seed_dir(config, seed) / "teacher"
    want = config.stage_hash("teacher")
    if _stage_fresh(out, want, seed):
        return out
    bundle = load_data(config, seed)
    ss = substreams(seed)["teacher"]
    model = init_model(config.teacher, seed=_state(ss),
                       exit_layers=(config.teacher.layers,))
    metrics = []
    try:
        train_supervised(model, bundle.train, config.teacher_plan,
                         np.random.default_rng(ss), dev=bundle.mixed,
                         metrics=metrics)
    except FloatingPointError as err:
        raise PipelineError(f"stage teacher failed: {err}") from err
    accs = _final_exit_accuracy(model, bundle.devs)
    _save_stage(model, out, stage="teacher", config=config, seed=seed,
                extra={"dev_accuracy": accs})
    _write_metrics(out, metrics)
    return out


def distill_ta_stage(config: PipelineConfig, seed: int) -> Path:
    """Multi-exit assistant distilled from the teacher's final logits.

    The assistant starts from the teacher's weights where parameter names
    match (backbone and final exit); fresh exits cover the other layers.
    """
    out = seed_dir(config, seed) / "ta"
    want = config.stage_hash("ta")
    if _stage_fresh(out, want, seed):
        return out
    teacher_dir = train_teacher_stage(config, seed)
    teacher = load_model(teacher_dir)
    bundle = load_data(config, seed)
    ss = substreams(seed)["ta"]
    ta = init_model(config.teacher, seed=_state(ss))
    named = dict(teacher.named_parameters())
    for name, tensor in ta.named_parameters():
        if name in named:
            tensor.value[...] = named[name].value
    metrics = []
    try:
        distill_ta(teacher, ta, bundle.train, config.ta_plan,
                   np.random.default_rng(ss), dev=bundle.mixed,
                   metrics=metrics)
    except FloatingPointError as err:
        raise PipelineError(f"stage ta failed: {err}") from err
    accs = {kind: evaluate_exits(ta, dev) for kind, dev in bundle.devs.items()}
    _save_stage(ta, out, stage="ta", config=config, seed=seed,
                extra={"dev_accuracy_per_exit": _stringify(accs)})
    _write_metrics(out, metrics)
    return out


def _stringify(nested):
    if isinstance(nested, dict):
        return {str(k): _stringify(v) for k, v in nested.items()}
    return nested


def _add_fresh_shallow_exits(model: MultiExitModel, rng) -> None:
    cfg = model.config
    for k in range(1, model.num_layers):
        if k not in model.exits:
            model.exits[k] = ExitHead(
                Tensor(truncated_normal(rng, (cfg.hidden, cfg.num_classes))),
                Tensor(np.zeros(cfg.num_classes)))


def slenderize_stage(config: PipelineConfig, seed: int) -> Path:
    """Iterative width reduction plus recovery, honoring the ablation mode.

    full:                exit-calibrated scoring, joint recovery with both
                         distillation losses.
    no-exit-calibration: scoring sees the final exit's loss only.
    no-pred / no-feat:   the respective recovery loss term is disabled.
    two-stage:           the backbone is the teacher, width-reduced and
                         recovered with final-exit losses only, so no
                         exit-aware training ever touches it; fresh
                         shallow exits are then fitted with the backbone
                         frozen.
    """
    out = mode_dir(config, seed) / "slender"
    want = config.stage_hash("slender")
    if _stage_fresh(out, want, seed):
        return out
    ta = load_model(distill_ta_stage(config, seed))
    bundle = load_data(config, seed)
    streams = substreams(seed)
    prune_rng = np.random.default_rng(streams["prune"])
    recovery_rng = np.random.default_rng(streams["recovery"])

    plan = config.recovery_plan
    if config.ablation == "no-pred":
        plan = replace(plan, enable_pred=False)
    elif config.ablation == "no-feat":
        plan = replace(plan, enable_feat=False)
    use_exit_losses = config.ablation != "no-exit-calibration"

    metrics = []
    try:
        if config.ablation == "two-stage":
            teacher = load_model(train_teacher_stage(config, seed))
            model, report = slenderize(teacher, config.goal, config.schedule,
                                       bundle.train, plan, prune_rng,
                                       dev=bundle.mixed)
            recovery_train(teacher, model, bundle.train, plan, recovery_rng,
                           dev=bundle.mixed, metrics=metrics)
            _add_fresh_shallow_exits(model, recovery_rng)
            fit_exit_heads(ta, model, bundle.train, plan, recovery_rng,
                           dev=bundle.mixed, metrics=metrics)
        else:
            model, report = slenderize(ta, config.goal, config.schedule,
                                       bundle.train, plan, prune_rng,
                                       use_exit_losses=use_exit_losses,
                                       dev=bundle.mixed)
            recovery_train(ta, model, bundle.train, plan, recovery_rng,
                           dev=bundle.mixed, metrics=metrics)
    except FloatingPointError as err:
        raise PipelineError(f"stage slender failed: {err}") from err
    accs = {kind: evaluate_exits(model, dev)
            for kind, dev in bundle.devs.items()}
    _save_stage(model, out, stage="slender", config=config, seed=seed,
                extra={"dev_accuracy_per_exit": _stringify(accs)})
    _write_metrics(out, metrics)
    (out / "prune_report.json").write_text(json.dumps(report, indent=2))
    return out


def reduction_ratios(base: MultiExitModel, model: MultiExitModel,
                     seq_len: int) -> dict:
    base_p = count_params(base)["total"]
    model_p = count_params(model)["total"]
    base_f = count_flops(base, seq_len, base.num_layers)["total"]
    model_f = count_flops(model, seq_len, model.num_layers)["total"]
    return {"params": base_p / model_p, "static_flops": base_f / model_f}


def eval_stage(config: PipelineConfig, seed: int) -> dict:
    """Static per-exit table, Pareto sweep, exit-depth splits, accounting."""
    out = mode_dir(config, seed) / "eval"
    want = config.stage_hash("eval")
    summary_path = out / "summary.json"
    if summary_path.exists():
        cached = json.loads(summary_path.read_text())
        if cached.get("stage_hash") == want and cached.get("seed") == seed:
            return cached
    model = load_model(slenderize_stage(config, seed))
    teacher = load_model(train_teacher_stage(config, seed))
    bundle = load_data(config, seed)
    out.mkdir(parents=True, exist_ok=True)

    per_exit = {kind: evaluate_exits(model, dev)
                for kind, dev in bundle.devs.items()}
    per_exit["mixed"] = evaluate_exits(model, bundle.mixed)

    records = pareto_sweep(model, bundle.mixed, config.thresholds,
                           csv_path=out / "pareto.csv")

    mid = float(np.median([float(t) for t in config.thresholds]))
    policy = ExitPolicy(threshold=mid)
    simple, rest = split_simple_instances(bundle.mixed)
    depth_split = {"threshold": mid}
    if len(simple):
        depth_split["simple_mean_exit_layer"] = \
            run_dataset(model, simple, policy).mean_exit_layer
    if len(rest):
        depth_split["rest_mean_exit_layer"] = \
            run_dataset(model, rest, policy).mean_exit_layer

    by_task = {}
    trace = run_dataset(model, bundle.mixed, policy)
    kinds = [tag.split(":")[0] for tag in bundle.mixed.tags]
    for kind in sorted(set(kinds)):
        rows = [e.exit_layer for e, k in zip(trace.entries, kinds)
                if k == kind]
        by_task[kind] = float(np.mean(rows))

    width = bundle.mixed.ids.shape[1]
    teacher_flops = count_flops(teacher, width, teacher.num_layers)["total"]
    accounting = {
        "teacher_params": count_params(teacher),
        "model_params": count_params(model),
        "reduction_vs_teacher": reduction_ratios(teacher, model, width),
        "teacher_self_reduction": reduction_ratios(teacher, teacher,
                                                   width)["params"],
        "dynamic_flops_reduction": {
            f"{r['h_t']:g}": teacher_flops / r["mean_flops"]
            for r in records},
    }

    summary = {"stage_hash": want, "seed": seed, "ablation": config.ablation,
               "per_exit_accuracy": _stringify(per_exit),
               "pareto": records,
               "exit_depth_split": depth_split,
               "mean_exit_layer_by_task": by_task,
               "accounting": accounting}
    summary_path.write_text(json.dumps(summary, indent=2))
    return summary


STAGE_FUNCS = {"teacher": train_teacher_stage, "ta": distill_ta_stage,
               "slender": slenderize_stage}


def run_all(config: PipelineConfig) -> dict:
    """Every stage for every seed, then a mean and sd summary."""
    per_seed = {}
    for seed in config.seeds:
        try:
            summary = eval_stage(config, seed)
        except PipelineError:
            raise
        except (FloatingPointError, ValueError) as err:
            raise PipelineError(f"stage eval failed for seed {seed}: "
                                f"{err}") from err
        per_seed[seed] = summary
    final = {}
    model_layers = config.goal.layers
    for kind in sorted(per_seed[config.seeds[0]]["per_exit_accuracy"]):
        vals = [per_seed[s]["per_exit_accuracy"][kind][str(model_layers)]
                for s in config.seeds]
        final[kind] = {"per_seed": vals,
                       "mean": float(np.mean(vals)),
                       "sd": float(np.std(vals, ddof=1) if len(vals) > 1
                                   else 0.0)}
    summary = {"ablation": config.ablation,
               "seeds": [int(s) for s in config.seeds],
               "final_exit_accuracy": final}
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"summary-{config.ablation}.json").write_text(
        json.dumps(summary, indent=2))
    comparison = {}
    for path in sorted(out.glob("summary-*.json")):
        mode = path.stem.replace("summary-", "", 1)
        comparison[mode] = json.loads(path.read_text())
    (out / "comparison.json").write_text(json.dumps(comparison, indent=2))
    return summary
