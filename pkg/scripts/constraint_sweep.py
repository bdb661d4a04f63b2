#!/usr/bin/env python3
"""Sweep the fluency and semantic constraint weights of the text attack.

Loads an aligned checkpoint plus dataset produced by the CLI and reports
mean decoded divergence / NLL as one penalty weight rises, averaged over
samples and seeds.

    python3 scripts/constraint_sweep.py --workdir runs/demo --axis sim
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from coattack.align import load_aligned_checkpoint  # noqa: E402
from coattack.config import RunConfig  # noqa: E402
from coattack.dataset import load_dataset, split_samples  # noqa: E402
from coattack.orchestrator import penalty_sweep  # noqa: E402


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--workdir", default="runs/pipeline")
    parser.add_argument("--axis", choices=["sim", "lm"], default="sim")
    parser.add_argument("--values", default="0,1,10", help="comma-separated weights")
    parser.add_argument("--samples", type=int, default=5)
    parser.add_argument("--seeds", type=int, default=20)
    parser.add_argument("--out", default=None, help="optional CSV destination")
    args = parser.parse_args()

    workdir = Path(args.workdir)
    samples, _, _ = load_dataset(workdir / "data")
    surrogate, answer_encoder, lm = load_aligned_checkpoint(workdir / "ckpt" / "aligned.cawb")
    for model in (surrogate, answer_encoder, lm):
        model.freeze()

    values = [float(v) for v in args.values.split(",")]
    pool = split_samples(samples, "test")[: args.samples]
    result = penalty_sweep(
        pool, surrogate, answer_encoder, lm, RunConfig().attack,
        vary=args.axis, values=values, seeds=range(args.seeds),
    )
    metric = "divergence" if args.axis == "sim" else "nll"
    print(f"axis={args.axis}, {args.samples} samples x {args.seeds} seeds")
    for value in values:
        row = result[value]
        print(f"  weight {value:>6.2f}: mean divergence {row['divergence']:.4f}  mean nll {row['nll']:.4f}")
    ordered = [result[v][metric] for v in values]
    trend = "non-increasing" if all(b <= a + 1e-9 for a, b in zip(ordered, ordered[1:])) else "NOT monotone"
    print(f"  {metric} trend as the weight rises: {trend}")

    if args.out:
        with open(args.out, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["weight", "divergence", "nll"])
            for value in values:
                writer.writerow([value, result[value]["divergence"], result[value]["nll"]])
        print(f"  wrote {args.out}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
