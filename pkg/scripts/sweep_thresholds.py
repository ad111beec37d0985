#!/usr/bin/env python3
"""Accuracy/compute frontier of a finished run at a fine threshold grid.

Loads a slender checkpoint produced by the pipeline, rebuilds the same
mixed eval set from the run's config, and sweeps the entropy gate over
a denser grid than the pipeline's eval stage uses.  Prints the frontier
and writes it as CSV next to the checkpoint.

Example:
    python scripts/sweep_thresholds.py --config runs/desk/config.json \
        --seed 0 --grid 0.01 0.7 15
"""

import argparse
from pathlib import Path

import numpy as np

from slimexit.checkpoint import load_model
from slimexit.exit_runtime import pareto_sweep
from slimexit.pipeline import PipelineConfig, load_data, mode_dir
from dataclasses import replace


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", required=True, help="pipeline config JSON")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--ablation", default=None,
                    help="which mode's checkpoint to sweep")
    ap.add_argument("--grid", type=float, nargs=3,
                    metavar=("LO", "HI", "STEPS"), default=[0.01, 0.7, 15],
                    help="linear grid of entropy thresholds in nats")
    args = ap.parse_args()

    config = PipelineConfig.from_json(args.config)
    if args.ablation is not None:
        config = replace(config, ablation=args.ablation)
    ckpt = mode_dir(config, args.seed) / "slender"
    if not ckpt.exists():
        raise SystemExit(f"no checkpoint at {ckpt}; run the pipeline first")
    model = load_model(ckpt)
    bundle = load_data(config, args.seed)

    lo, hi, steps = args.grid
    thresholds = [float(t) for t in np.linspace(lo, hi, int(steps))]
    csv_path = Path(ckpt).parent / "sweep.csv"
    records = pareto_sweep(model, bundle.mixed, thresholds,
                           csv_path=csv_path)

    print(f"{'H_T':>6}  {'acc':>6}  {'mean exit':>9}  {'mean flops':>11}")
    for r in records:
        print(f"{r['h_t']:6.3f}  {r['accuracy']:6.4f}  "
              f"{r['mean_exit_layer']:9.3f}  {r['mean_flops']:11.0f}")
    print(f"written to {csv_path}")


if __name__ == "__main__":
    main()
