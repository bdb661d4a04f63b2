"""End-to-end command line checks at miniature scale."""

import json
from pathlib import Path

import numpy as np
import pytest

from coattack.cli import main

TINY_CFG = """
[run]
global_seed = 3

[dataset]
n_samples = 160

[encoder]
hidden_size = 32
depth = 1
heads = 2
mlp_size = 48

[lm]
epochs = 3

[alignment]
epochs = 6
early_stop_accuracy = 0.85

[text_attack]
inner_steps = 2
decode_samples = 6

[attack]
outer_steps = 5

[victims]
count = 1
name_1 = tiny
hidden_1 = 32
depth_1 = 1
heads_1 = 2
mlp_1 = 48
seed_1 = 101

[eval]
n_eval = 4
victim_max_epochs = 8
victim_target_accuracy = 0.3
victim_early_stop = 0.9
"""


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cliwork")
    (root / "run.cfg").write_text(TINY_CFG)
    return root


def run_cli(workdir, *argv):
    import os

    old = os.getcwd()
    os.chdir(workdir)
    try:
        return main(list(argv))
    finally:
        os.chdir(old)


@pytest.mark.order1
class TestPipelineCommands:
    def test_step1_gen_data(self, workdir, capsys):
        assert run_cli(workdir, "gen-data", "--config", "run.cfg") == 0
        assert (workdir / "data" / "manifest.jsonl").exists()
        assert (workdir / "data" / "vocab.txt").exists()
        out = capsys.readouterr().out
        assert "160 samples" in out

    def test_step2_align(self, workdir):
        assert run_cli(workdir, "align", "--config", "run.cfg") == 0
        assert (workdir / "ckpt" / "aligned.cawb").exists()
        metrics = (workdir / "ckpt" / "alignment_metrics.csv").read_text().splitlines()
        assert metrics[0] == "epoch,loss,retrieval_accuracy"
        assert len(metrics) >= 2

    def test_step3_attack_writes_records(self, workdir):
        assert run_cli(workdir, "attack", "--config", "run.cfg", "--mode", "coordinated", "--count", "4") == 0
        records = [json.loads(l) for l in (workdir / "out" / "attacks.jsonl").read_text().splitlines()]
        assert len(records) == 4
        rec = records[0]
        assert {"sample_id", "decoded_question", "clean_similarity", "best_similarity", "trace"} <= set(rec)
        assert (workdir / "out" / rec["delta"]).exists()
        assert (workdir / "out" / rec["adv_image"]).exists()
        assert (workdir / "out" / rec["preview"]).exists()
        assert rec["best_similarity"] <= rec["clean_similarity"] + 1e-12

    def test_step4_eval_and_report(self, workdir, capsys):
        assert run_cli(workdir, "eval", "--config", "run.cfg") == 0
        out = capsys.readouterr().out
        assert "coordinated" in out and "image_only" in out and "text_only" in out
        csv_rows = (workdir / "out" / "asr.csv").read_text().strip().splitlines()
        assert len(csv_rows) == 1 + 1 * 3  # one victim, three modes
        assert run_cli(workdir, "report", "--report", "out") == 0

    def test_step5_attack_without_victims(self, workdir):
        # deleting every victim checkpoint must not affect the attack command
        for path in (workdir / "ckpt").glob("victim_*.cawb"):
            path.unlink()
        assert run_cli(workdir, "attack", "--config", "run.cfg", "--count", "2", "--out", "out2") == 0
        assert (workdir / "out2" / "attacks.jsonl").exists()


class TestCliContract:
    def test_unknown_flag_exits_2(self, workdir, capsys):
        assert run_cli(workdir, "gen-data", "--bogus-flag") == 2
        assert "usage" in capsys.readouterr().err.lower()

    def test_unknown_command_exits_2(self, workdir, capsys):
        assert run_cli(workdir, "explode") == 2

    def test_missing_config_exits_1(self, workdir, capsys):
        assert run_cli(workdir, "align", "--config", "missing.cfg") == 1
        assert "error" in capsys.readouterr().err.lower()

    def test_gradcheck_passes(self, workdir, capsys):
        assert run_cli(workdir, "gradcheck") == 0
        out = capsys.readouterr().out
        assert "PASS" in out and "FAIL" not in out

    def test_write_config_round_trip(self, workdir, tmp_path):
        target = tmp_path / "regen.cfg"
        assert run_cli(workdir, "write-config", "--out", str(target)) == 0
        from coattack.config import load_run_config

        assert load_run_config(target).attack.outer_steps == 20


class TestDeterminism:
    def test_gen_data_reproducible(self, tmp_path):
        (tmp_path / "run.cfg").write_text("[dataset]\nn_samples = 24\nseed = 9\n")
        assert run_cli(tmp_path, "gen-data", "--config", "run.cfg", "--out", "d1") == 0
        assert run_cli(tmp_path, "gen-data", "--config", "run.cfg", "--out", "d2") == 0
        a = (tmp_path / "d1" / "manifest.jsonl").read_bytes()
        b = (tmp_path / "d2" / "manifest.jsonl").read_bytes()
        assert a == b
        img_a = (tmp_path / "d1" / "images" / "000001.bin").read_bytes()
        img_b = (tmp_path / "d2" / "images" / "000001.bin").read_bytes()
        assert img_a == img_b
