"""Workbench entry point: gen-data, align, attack, eval, gradcheck, report.

Exit codes: 0 success, 1 invariant or quality failure, 2 usage error.
Set COATTACK_LOG to DEBUG/INFO/WARNING to control verbosity.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .align import load_aligned_checkpoint, save_aligned_checkpoint, align, write_metrics_csv
from .checks import assert_victim_independence
from .config import RunConfig, load_run_config, write_run_config
from .dataset import generate_dataset, load_dataset, save_png, split_samples
from .encoders import AnswerEncoder, SurrogateEncoder
from .evaluation import ablation_suite, load_report, report_payload, validate_report, write_report
from .gradcheck import DEFAULT_TOLERANCE, run_all
from .lm import BigramLanguageModel, TransformerLanguageModel
from .orchestrator import run_attacks
from .tensor import write_tensor
from .victims import TrainingError, load_victim, save_victim, train_toy_victim
from .vocab import ANSWER_WORDS

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2
log = logging.getLogger("coattack")


def _configure_logging() -> None:
    level = os.environ.get("COATTACK_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")


def _load_config(args) -> RunConfig:
    config = load_run_config(args.config) if args.config else RunConfig()
    if getattr(args, "seed", None) is not None:
        config = config.with_seed(args.seed)
    return config


def _load_attack_assets(config: RunConfig):
    samples, vocab, _ = load_dataset(config.data_dir)
    surrogate, answer_encoder, lm = load_aligned_checkpoint(Path(config.checkpoint_dir) / "aligned.cawb")
    surrogate.freeze()
    answer_encoder.freeze()
    if lm is not None:
        lm.freeze()
    return samples, vocab, surrogate, answer_encoder, lm


def cmd_gen_data(args) -> int:
    config = _load_config(args)
    out = args.out or config.data_dir
    samples = generate_dataset(config.dataset, out)
    print(f"gen-data: wrote {len(samples)} samples to {out} (seed {config.dataset.seed})")
    return EXIT_OK


def cmd_align(args) -> int:
    config = _load_config(args)
    samples, vocab, _ = load_dataset(config.data_dir)
    train = split_samples(samples, "train")
    val = split_samples(samples, "val")
    enc_cfg = config.encoder_config(len(vocab))
    surrogate = SurrogateEncoder(enc_cfg, seed=config.surrogate_seed)
    answer_encoder = AnswerEncoder(enc_cfg, seed=config.answer_seed)

    questions = [s.question_ids for s in train]
    if config.lm.kind == "transformer":
        lm = TransformerLanguageModel(config.lm_config(len(vocab)), seed=config.lm_seed)
        lm.fit(questions, epochs=config.lm.epochs, lr=config.lm.lr, seed=config.lm_seed)
    else:
        lm = BigramLanguageModel.fit_counts(questions, len(vocab))

    result = align(train, val, surrogate, answer_encoder, config.alignment)
    ckpt_dir = Path(args.out or config.checkpoint_dir)
    save_aligned_checkpoint(ckpt_dir / "aligned.cawb", surrogate, answer_encoder, lm)
    write_metrics_csv(ckpt_dir / "alignment_metrics.csv", result.metrics)
    final_acc = result.metrics[-1].retrieval_accuracy if result.metrics else float("nan")
    print(
        f"align: {result.epochs_run} epochs, held-out retrieval {final_acc:.3f}, "
        f"checkpoint {ckpt_dir / 'aligned.cawb'}"
    )
    if result.aborted:
        print("align: aborted on non-finite loss; last good checkpoint kept", file=sys.stderr)
        return EXIT_FAILURE
    return EXIT_OK


def cmd_attack(args) -> int:
    assert_victim_independence()
    config = _load_config(args)
    samples, vocab, surrogate, answer_encoder, lm = _load_attack_assets(config)
    mode = args.mode or config.attack.mode
    attack_cfg = replace(config.attack, mode=mode)
    pool = sorted(split_samples(samples, "test"), key=lambda s: s.sample_id)
    count = args.count or config.evaluation.n_eval
    pool = pool[:count]
    if not pool:
        print("attack: no test samples available", file=sys.stderr)
        return EXIT_FAILURE
    examples = run_attacks(pool, surrogate, answer_encoder, lm, attack_cfg, config.global_seed, workers=args.workers)

    outdir = Path(args.out or config.report_dir)
    (outdir / "deltas").mkdir(parents=True, exist_ok=True)
    (outdir / "adv_images").mkdir(parents=True, exist_ok=True)
    (outdir / "adv_previews").mkdir(parents=True, exist_ok=True)
    by_id = {s.sample_id: s for s in pool}
    aborted = 0
    with open(outdir / "attacks.jsonl", "w", encoding="utf-8") as fh:
        for ex in examples:
            ex.validate(by_id[ex.sample_id], attack_cfg.image.epsilon)
            aborted += int(ex.aborted)
            rel_delta = f"deltas/{ex.sample_id:06d}.bin"
            rel_adv = f"adv_images/{ex.sample_id:06d}.bin"
            rel_png = f"adv_previews/{ex.sample_id:06d}.png"
            with open(outdir / rel_delta, "wb") as bf:
                write_tensor(bf, ex.delta)
            with open(outdir / rel_adv, "wb") as bf:
                write_tensor(bf, ex.adv_image)
            save_png(outdir / rel_png, ex.adv_image)
            record = {
                "sample_id": ex.sample_id,
                "mode": ex.mode,
                "seed": ex.seed,
                "aborted": ex.aborted,
                "clean_similarity": ex.clean_similarity,
                "best_similarity": ex.best_similarity,
                "clean_question": by_id[ex.sample_id].question,
                "decoded_ids": [int(i) for i in ex.decoded_ids],
                "decoded_question": vocab.decode(ex.decoded_ids),
                "decoded_nll": ex.decoded_nll,
                "decoded_divergence": ex.decoded_divergence,
                "delta": rel_delta,
                "adv_image": rel_adv,
                "preview": rel_png,
                "trace": ex.trace,
            }
            fh.write(json.dumps(record, sort_keys=True) + "\n")
    mean_drop = float(np.mean([ex.clean_similarity - ex.best_similarity for ex in examples]))
    print(
        f"attack[{mode}]: {len(examples)} samples, {aborted} aborted, "
        f"mean similarity drop {mean_drop:.4f}, records in {outdir}"
    )
    return EXIT_OK


def _victims_for(config: RunConfig, vocab_size: int, train, val, ckpt_dir: Path):
    victims = []
    for vcfg in config.victim_configs(vocab_size):
        path = ckpt_dir / f"victim_{vcfg.name}.cawb"
        if path.exists():
            victim = load_victim(path)
            accuracy = victim.accuracy(val)
            if accuracy < vcfg.target_accuracy:
                raise TrainingError(
                    f"victim {vcfg.name!r} loaded below target accuracy ({accuracy:.3f})"
                )
        else:
            victim = train_toy_victim(train, val, vcfg, len(ANSWER_WORDS))
            save_victim(path, victim)
        victims.append(victim)
    return victims


def cmd_eval(args) -> int:
    config = _load_config(args)
    samples, vocab, surrogate, answer_encoder, lm = _load_attack_assets(config)
    train = split_samples(samples, "train")
    val = split_samples(samples, "val")
    test = split_samples(samples, "test")
    victims = _victims_for(config, len(vocab), train, val, Path(config.checkpoint_dir))
    report = ablation_suite(
        test,
        surrogate,
        answer_encoder,
        lm,
        victims,
        config.attack,
        n_eval=args.count or config.evaluation.n_eval,
        global_seed=config.global_seed,
        workers=args.workers,
        config_snapshot=config.snapshot(),
    )
    outdir = Path(args.report or args.out or config.report_dir)
    write_report(outdir, report)
    problems = validate_report(report_payload(report), n_victims=len(victims))
    for row in report.asr_rows:
        print(f"  {row['victim']:>10s}  {row['mode']:<11s} ASR {row['asr']:6.2f}%  (n={row['n']}, aborted={row['aborted']})")
    print(f"eval: {len(report.asr_rows)} rows over {report.n_clean_correct} clean-correct samples -> {outdir}")
    if problems:
        for p in problems:
            print(f"invariant violation: {p}", file=sys.stderr)
        return EXIT_FAILURE
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    del args
    rows, ok = run_all()
    for name, err in rows:
        status = "PASS" if err < DEFAULT_TOLERANCE else "FAIL"
        print(f"{status} {name}: max relative error {err:.3e}")
    print(f"gradcheck: {len(rows)} checks, tolerance {DEFAULT_TOLERANCE:g}, {'all passed' if ok else 'FAILURES'}")
    return EXIT_OK if ok else EXIT_FAILURE


def cmd_report(args) -> int:
    outdir = args.report or args.out or RunConfig().report_dir
    payload = load_report(outdir)
    problems = validate_report(payload)
    for row in payload["asr"]:
        print(f"  {row['victim']:>10s}  {row['mode']:<11s} ASR {row['asr']:6.2f}%  (n={row['n']}, aborted={row['aborted']})")
    print(f"report: {len(payload['asr'])} rows, seed {payload['global_seed']}")
    if problems:
        for p in problems:
            print(f"invariant violation: {p}", file=sys.stderr)
        return EXIT_FAILURE
    return EXIT_OK


def cmd_write_config(args) -> int:
    config = _load_config(args)
    path = args.out or "run.cfg"
    write_run_config(path, config)
    print(f"write-config: defaults written to {path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="coattack", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, mode_flag=False, count_flag=False, report_flag=False):
        p.add_argument("--config", help="run configuration file (key = value sections)")
        p.add_argument("--seed", type=int, help="override the global seed")
        p.add_argument("--workers", type=int, default=1, help="worker pool size for per-sample attacks")
        p.add_argument("--out", help="output directory override")
        if mode_flag:
            p.add_argument("--mode", choices=["coordinated", "image_only", "text_only"], help="attack mode")
        if count_flag:
            p.add_argument("--count", type=int, help="number of samples to process")
        if report_flag:
            p.add_argument("--report", help="report directory")

    common(sub.add_parser("gen-data", help="generate the synthetic dataset"))
    common(sub.add_parser("align", help="train the language model and align the encoders"))
    common(sub.add_parser("attack", help="craft adversarial examples (no victims involved)"), mode_flag=True, count_flag=True)
    common(sub.add_parser("eval", help="train/load victims and run the mode ablation"), count_flag=True, report_flag=True)
    common(sub.add_parser("gradcheck", help="finite-difference checks for all primitives"))
    common(sub.add_parser("report", help="validate and print an evaluation report"), report_flag=True)
    common(sub.add_parser("write-config", help="write the effective configuration to a file"))

    handlers = {
        "gen-data": cmd_gen_data,
        "align": cmd_align,
        "attack": cmd_attack,
        "eval": cmd_eval,
        "gradcheck": cmd_gradcheck,
        "report": cmd_report,
        "write-config": cmd_write_config,
    }
    parser.set_defaults(handlers=handlers)
    return parser


def main(argv=None) -> int:
    _configure_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    try:
        return args.handlers[args.command](args)
    except Exception as exc:  # surface quality/invariant failures as exit 1
        log.debug("command failed", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
