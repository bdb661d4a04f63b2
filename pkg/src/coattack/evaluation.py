"""Victim-side evaluation: success rates and the mode ablation suite.

Success means the victim's response to the adversarial pair differs from
its response to the clean pair.  Only samples every victim classifies
correctly on clean inputs enter the pool, and attacks that abort are
dropped from denominators and reported separately.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .orchestrator import MODES, CoordinatedAttackConfig, run_attacks
from .victims import ToyVictim


class EvalError(ValueError):
    pass


@dataclass
class EvalReport:
    asr_rows: list = field(default_factory=list)
    outcomes: dict = field(default_factory=dict)
    config_snapshot: dict = field(default_factory=dict)
    global_seed: int = 0
    n_candidates: int = 0
    n_clean_correct: int = 0
    runtime_seconds: float = 0.0


def compute_asr(results: Sequence[tuple[int, int]]) -> float:
    """Percent of (clean, adversarial) response pairs that differ."""
    if not results:
        raise EvalError("cannot compute a success rate over zero evaluated samples")
    changed = sum(1 for clean, adv in results if clean != adv)
    return 100.0 * changed / len(results)


def ablation_suite(
    samples,
    surrogate,
    answer_encoder,
    lm,
    victims: Sequence[ToyVictim],
    attack_config: CoordinatedAttackConfig,
    n_eval: int,
    global_seed: int,
    workers: int = 1,
    min_eval: int | None = None,
    config_snapshot: dict | None = None,
) -> EvalReport:
    """Run every attack mode over one clean-correct pool of samples.

    The pool is the first ``n_eval`` samples (by id) that all victims
    answer correctly; per-sample seeds are identical across modes.
    """
    started = time.perf_counter()
    if not victims:
        raise EvalError("ablation needs at least one victim")
    required = n_eval if min_eval is None else min_eval
    ordered = sorted(samples, key=lambda s: s.sample_id)
    clean_responses: dict[int, dict[str, int]] = {}
    pool = []
    for s in ordered:
        answers = {v.config.name: v.response(s.image, s.question_ids) for v in victims}
        if all(a == s.label for a in answers.values()):
            clean_responses[s.sample_id] = answers
            pool.append(s)
        if len(pool) >= n_eval:
            break
    if len(pool) < required:
        raise EvalError(
            f"only {len(pool)} of the required {required} samples are correctly "
            f"classified by every victim"
        )
    pool = pool[:n_eval]

    outcomes: dict[int, dict] = {
        s.sample_id: {"clean": clean_responses[s.sample_id], "adv": {}, "aborted": {}} for s in pool
    }
    asr_rows = []
    for mode in MODES:
        mode_config = replace(attack_config, mode=mode)
        examples = run_attacks(pool, surrogate, answer_encoder, lm, mode_config, global_seed, workers)
        by_id = {ex.sample_id: ex for ex in examples}
        for s in pool:
            ex = by_id[s.sample_id]
            ex.validate(s, mode_config.image.epsilon)
            outcomes[s.sample_id]["aborted"][mode] = ex.aborted
            if ex.aborted:
                continue
            outcomes[s.sample_id]["adv"][mode] = {
                v.config.name: v.response(ex.adv_image, ex.decoded_ids) for v in victims
            }
        for v in victims:
            pairs = [
                (outcomes[s.sample_id]["clean"][v.config.name], outcomes[s.sample_id]["adv"][mode][v.config.name])
                for s in pool
                if not outcomes[s.sample_id]["aborted"][mode]
            ]
            aborted = sum(1 for s in pool if outcomes[s.sample_id]["aborted"][mode])
            asr_rows.append(
                {
                    "victim": v.config.name,
                    "mode": mode,
                    "asr": compute_asr(pairs),
                    "n": len(pairs),
                    "changed": sum(1 for c, a in pairs if c != a),
                    "aborted": aborted,
                }
            )
    return EvalReport(
        asr_rows=asr_rows,
        outcomes=outcomes,
        config_snapshot=config_snapshot or {},
        global_seed=global_seed,
        n_candidates=len(ordered),
        n_clean_correct=len(pool),
        runtime_seconds=time.perf_counter() - started,
    )


def report_payload(report: EvalReport) -> dict:
    """JSON-ready body; runtime lives in a sidecar to keep bytes stable."""
    return {
        "asr": report.asr_rows,
        "outcomes": {str(k): v for k, v in sorted(report.outcomes.items())},
        "config": report.config_snapshot,
        "global_seed": report.global_seed,
        "n_candidates": report.n_candidates,
        "n_clean_correct": report.n_clean_correct,
    }


def write_report(outdir, report: EvalReport) -> None:
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    (outdir / "report.json").write_text(
        json.dumps(report_payload(report), sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    with open(outdir / "asr.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["victim", "mode", "asr", "n", "aborted"])
        for row in report.asr_rows:
            writer.writerow([row["victim"], row["mode"], repr(row["asr"]), row["n"], row["aborted"]])
    (outdir / "timing.json").write_text(
        json.dumps({"runtime_seconds": report.runtime_seconds}) + "\n", encoding="utf-8"
    )


def load_report(outdir) -> dict:
    return json.loads((Path(outdir) / "report.json").read_text(encoding="utf-8"))


def validate_report(payload: dict, n_victims: int | None = None) -> list[str]:
    """Invariant check list; empty means the report is internally coherent."""
    problems = []
    rows = payload.get("asr", [])
    for row in rows:
        if not (0.0 <= row["asr"] <= 100.0):
            problems.append(f"asr out of range: {row}")
        if row["n"] < 0 or row["aborted"] < 0:
            problems.append(f"negative counts: {row}")
        if row.get("changed", 0) > row["n"]:
            problems.append(f"more changes than evaluations: {row}")
    victims = {row["victim"] for row in rows}
    modes = {row["mode"] for row in rows}
    if len(rows) != len(victims) * len(modes):
        problems.append(f"expected {len(victims)}x{len(modes)} rows, found {len(rows)}")
    if set(modes) != set(MODES):
        problems.append(f"modes {sorted(modes)} do not match {sorted(MODES)}")
    if n_victims is not None and len(victims) != n_victims:
        problems.append(f"expected {n_victims} victims, found {len(victims)}")
    return problems
