#!/usr/bin/env python3
"""Desk-scale end-to-end run: teacher, assistant, slender model, eval.

Writes a pipeline config JSON into the output directory and drives the
CLI with it, so the artifacts on disk are exactly what a hand-driven
`python -m slimexit run-all --config ...` would produce.  With
--all-modes the four ablation variants are run as well (teacher and
assistant checkpoints are shared across modes); comparison.json in the
output directory then holds the five-way summary.

Example:
    python scripts/run_desk_pipeline.py --out runs/desk --seeds 0 1 2
"""

import argparse
import json
from pathlib import Path

from slimexit.cli import main as cli_main
from slimexit.pipeline import MODES


def desk_config(out_dir, seeds):
    task = dict(vocab_size=64, min_length=6, max_length=15,
                train_size=1024, dev_size=1024)
    model = dict(layers=6, hidden=64, num_heads=4, head_size=16, ffn=256,
                 vocab_size=64, max_positions=16, num_type_ids=2,
                 num_classes=2, embed_rank=None, seq_len=16)
    plan = dict(temperature=1.0, enable_pred=True, enable_feat=False,
                gradient_equilibrium=True, learning_rate=3e-4,
                batch_size=32, weight_decay=0.01, clip_norm=1.0,
                pred_weight=1.0, feat_weight=1.0, eval_interval=100)
    return {
        "tasks": [dict(kind=k, **task)
                  for k in ("KEYWORD", "MAJORITY", "ORDER")],
        "teacher": model,
        "goal": {**model, "num_heads": 2, "ffn": 64, "embed_rank": 16},
        "teacher_plan": {**plan, "steps": 500},
        "ta_plan": {**plan, "steps": 400, "learning_rate": 1e-4},
        "recovery_plan": {**plan, "steps": 40, "enable_feat": True,
                          "temperature": 2.0},
        "schedule": {"iterations": 2, "drop_fraction": 0.5,
                     "recovery_steps": 20, "min_survivors": 1,
                     "mode": "uniform"},
        "thresholds": [0.05, 0.1, 0.2, 0.35, 0.5],
        "seeds": list(seeds),
        "out_dir": str(out_dir),
        "ablation": "full",
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/desk", help="output directory")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--all-modes", action="store_true",
                    help="also run the four ablation variants")
    ap.add_argument("--threads", type=int, default=None,
                    help="BLAS thread cap, forwarded to the CLI")
    args = ap.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    config_path = out / "config.json"
    config_path.write_text(json.dumps(desk_config(out, args.seeds),
                                      indent=2))
    print(f"config written to {config_path}")

    modes = MODES if args.all_modes else ("full",)
    for mode in modes:
        print(f"=== mode {mode} ===", flush=True)
        argv = ["run-all", "--config", str(config_path), "--ablation", mode]
        if args.threads is not None:
            argv += ["--threads", str(args.threads)]
        cli_main(argv)

    comparison = out / "comparison.json"
    if comparison.exists():
        print(f"comparison across modes: {comparison}")


if __name__ == "__main__":
    main()
