#!/usr/bin/env python3
"""End-to-end pipeline driver: data, alignment, attack, evaluation.

Runs every stage through the CLI in a single working directory and prints
per-stage wall time plus the final success-rate table.

    python3 scripts/run_pipeline.py --workdir runs/demo --seed 0
"""

from __future__ import annotations

import argparse
import os
import sys
import time
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from coattack.cli import main as coattack_main  # noqa: E402


def run_stage(name: str, argv: list[str]) -> float:
    started = time.perf_counter()
    code = coattack_main(argv)
    elapsed = time.perf_counter() - started
    print(f"[stage {name}] exit={code} elapsed={elapsed:.1f}s")
    if code != 0:
        raise SystemExit(code)
    return elapsed


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--workdir", default="runs/pipeline", help="directory for all artifacts")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--config", default=None, help="optional run configuration file")
    parser.add_argument("--count", type=int, default=100, help="samples to attack/evaluate")
    parser.add_argument("--workers", type=int, default=1)
    args = parser.parse_args()

    workdir = Path(args.workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    os.chdir(workdir)

    base = []
    if args.config:
        base = ["--config", str(Path(args.config).resolve())]
    seed = ["--seed", str(args.seed)]
    workers = ["--workers", str(args.workers)]

    total = 0.0
    total += run_stage("gen-data", ["gen-data", *base, *seed])
    total += run_stage("align", ["align", *base, *seed])
    total += run_stage(
        "attack", ["attack", *base, *seed, *workers, "--mode", "coordinated", "--count", str(args.count)]
    )
    total += run_stage("eval", ["eval", *base, *seed, *workers, "--count", str(args.count)])
    run_stage("report", ["report", "--report", "out"])
    print(f"pipeline complete in {total:.1f}s (artifacts under {workdir.resolve()})")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
