"""Run configuration file round trips and fraction parsing."""

import pytest

from coattack.config import (
    ConfigFileError,
    RunConfig,
    load_run_config,
    parse_number,
    write_run_config,
)


def test_parse_number_fractions():
    assert parse_number("8/255") == pytest.approx(8.0 / 255.0)
    assert parse_number("0.5") == 0.5
    assert parse_number(" 2/255 ") == pytest.approx(2.0 / 255.0)


def test_defaults_are_coherent():
    config = RunConfig()
    assert config.attack.image.epsilon == pytest.approx(8.0 / 255.0)
    assert config.attack.image.alpha == pytest.approx(2.0 / 255.0)
    assert config.attack.outer_steps == 20
    assert config.attack.text.tau == 0.5
    assert len(config.victims) == 3
    enc = config.encoder_config()
    assert (enc.hidden_size, enc.depth, enc.heads, enc.mlp_size, enc.patch_size) == (64, 2, 4, 128, 8)


def test_round_trip_through_file(tmp_path):
    config = RunConfig().with_seed(5)
    path = tmp_path / "run.cfg"
    write_run_config(path, config)
    loaded = load_run_config(path)
    assert loaded.global_seed == 5
    assert loaded.dataset.seed == 5
    assert loaded.attack.text.lr == config.attack.text.lr
    assert loaded.attack.image.epsilon == pytest.approx(config.attack.image.epsilon)
    assert loaded.victims == config.victims
    assert loaded.alignment.temperature == config.alignment.temperature


def test_partial_file_overlays_defaults(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("[dataset]\nn_samples = 64\n\n[image_attack]\nepsilon = 4/255\nalpha = 1/255\n")
    config = load_run_config(path)
    assert config.dataset.n_samples == 64
    assert config.attack.image.epsilon == pytest.approx(4.0 / 255.0)
    assert config.attack.text.tau == 0.5  # untouched default


def test_missing_file_rejected(tmp_path):
    with pytest.raises(ConfigFileError):
        load_run_config(tmp_path / "nope.cfg")


def test_victim_configs_carry_shared_task_dims():
    config = RunConfig()
    for vcfg in config.victim_configs(vocab_size=31):
        assert vcfg.encoder.vocab_size == 31
        assert vcfg.encoder.height == config.dataset.image_size
        assert vcfg.encoder.patch_size == config.encoder.patch_size
    names = [v.name for v in config.victims]
    assert len(set(names)) == 3


def test_snapshot_is_json_ready():
    import json

    payload = RunConfig().snapshot()
    encoded = json.dumps(payload, sort_keys=True)
    assert "global_seed" in payload and "attack" in payload
    assert isinstance(encoded, str)
