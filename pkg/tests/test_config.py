import dataclasses

import pytest

from poisonlab.config import (
    ExperimentConfig,
    config_from_mapping,
    config_to_text,
    default_config,
    load_config,
    parse_config_text,
)


def test_defaults_are_valid():
    cfg = default_config()
    assert cfg.mode == "smooth"
    assert cfg.smooth_count == 4
    assert cfg.target_class == 2


def test_text_round_trip():
    cfg = dataclasses.replace(
        default_config(), mode="hard", hidden=(64, 32), master_seed=9, strip_weight=0.4
    )
    back = config_from_mapping(parse_config_text(config_to_text(cfg)))
    assert back == cfg


def test_parse_ignores_comments_and_blanks():
    text = "# a comment\n\nrun.master_seed = 5\nattack.mode=hard\n"
    mapping = parse_config_text(text)
    assert mapping == {"run.master_seed": "5", "attack.mode": "hard"}
    cfg = config_from_mapping(mapping)
    assert cfg.master_seed == 5 and cfg.mode == "hard"


def test_unknown_key_rejected():
    with pytest.raises(ValueError, match="unknown"):
        config_from_mapping({"attack.zap": "1"})


def test_bad_value_rejected():
    with pytest.raises(ValueError):
        config_from_mapping({"run.master_seed": "soup"})
    with pytest.raises(ValueError):
        config_from_mapping({"train.clean_epochs": "0"})
    with pytest.raises(ValueError):
        config_from_mapping({"attack.mode": "fuzzy"})
    with pytest.raises(ValueError):
        config_from_mapping({"data.test_fraction": "1.5"})


def test_hidden_parses_comma_list():
    cfg = config_from_mapping({"model.hidden": "64,32"})
    assert cfg.hidden == (64, 32)


def test_load_config_defaults_file_then_seed(tmp_path):
    path = tmp_path / "exp.cfg"
    path.write_text("run.master_seed = 7\nattack.template = sig\n")
    cfg = load_config(path, seed=None)
    assert cfg.master_seed == 7 and cfg.template == "sig"
    assert cfg.per_class == default_config().per_class
    override = load_config(path, seed=99)
    assert override.master_seed == 99

    assert load_config(None, seed=5).master_seed == 5
    assert load_config(None, seed=None) == default_config()


def test_config_validation_direct():
    with pytest.raises(ValueError):
        ExperimentConfig(mode="other")
    with pytest.raises(ValueError):
        ExperimentConfig(smooth_rate=0.0)
    with pytest.raises(ValueError):
        ExperimentConfig(template="mosaic")
    with pytest.raises(ValueError):
        ExperimentConfig(data_source="webcam")


def test_config_text_lists_every_registry_key():
    text = config_to_text(default_config())
    mapping = parse_config_text(text)
    for key in (
        "data.class_count",
        "model.hidden",
        "train.clean_epochs",
        "train.victim_lr",
        "attack.mode",
        "strip.overlays",
        "cleanse.steps",
        "run.master_seed",
    ):
        assert key in mapping
