"""Command-line front end for the compression pipeline.

Subcommands map one-to-one onto pipeline stages; `run-all` chains them
for every configured seed and writes the cross-seed summary.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace

_thread_limiter = None


def _apply_thread_limit(n: int) -> None:
    global _thread_limiter
    try:
        from threadpoolctl import threadpool_limits
        _thread_limiter = threadpool_limits(limits=n)
    except ImportError:
        import os
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                    "MKL_NUM_THREADS"):
            os.environ[var] = str(n)


def _parser():
    p = argparse.ArgumentParser(
        prog="slimexit",
        description="Compress a multi-exit encoder and serve it with "
                    "entropy-gated early exits.")
    sub = p.add_subparsers(dest="command", required=True)
    for name, help_text in [
            ("train-teacher", "train the single-exit teacher"),
            ("distill-ta", "distill the multi-exit assistant"),
            ("slenderize", "shrink widths and recover"),
            ("eval", "static and dynamic evaluation"),
            ("run-all", "every stage for every seed")]:
        cmd = sub.add_parser(name, help=help_text)
        cmd.add_argument("--config", required=True,
                         help="pipeline config JSON")
        cmd.add_argument("--seed", type=int, default=None,
                         help="override: run only this seed")
        cmd.add_argument("--ablation", default=None,
                         help="override the config's ablation mode")
        cmd.add_argument("--out", default=None,
                         help="override the output directory")
        cmd.add_argument("--threads", type=int, default=None,
                         help="BLAS thread cap")
        cmd.add_argument("--deterministic", action="store_true",
                         help="single-threaded numerics for bit-stable runs")
    return p


def _load_config(args):
    from .pipeline import PipelineConfig
    config = PipelineConfig.from_json(args.config)
    if args.seed is not None:
        config = replace(config, seeds=[args.seed])
    if args.ablation is not None:
        config = replace(config, ablation=args.ablation)
    if args.out is not None:
        config = replace(config, out_dir=args.out)
    return config


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    if args.deterministic:
        _apply_thread_limit(1)
    elif args.threads is not None:
        _apply_thread_limit(args.threads)

    from . import pipeline
    config = _load_config(args)

    if args.command == "run-all":
        summary = pipeline.run_all(config)
        print(json.dumps(summary, indent=2))
        return 0

    stage = {"train-teacher": pipeline.train_teacher_stage,
             "distill-ta": pipeline.distill_ta_stage,
             "slenderize": pipeline.slenderize_stage,
             "eval": pipeline.eval_stage}[args.command]
    for seed in config.seeds:
        result = stage(config, seed)
        if args.command == "eval":
            by_task = result["mean_exit_layer_by_task"]
            print(f"seed {seed}: final-exit accuracy "
                  f"{result['per_exit_accuracy']['mixed']}")
            print(f"seed {seed}: mean exit layer by task {by_task}")
        else:
            print(f"seed {seed}: {args.command} -> {result}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
