#!/usr/bin/env python3
"""Config records and the key = value file format."""

import pytest

from retinagan.core.config import (DetectorConfig, TrainConfig, config_from_dict, config_to_dict, config_to_text,
                                   override, parse_config_text, read_config, write_config)
from retinagan.core.errors import ConfigError


def test_defaults():
    config = TrainConfig()
    assert (config.steps, config.batch_size, config.lr, config.beta1) == (5000, 8, 1e-4, 0.1)
    assert (config.lambda_gan, config.lambda_cycle, config.lambda_prcp) == (1.0, 10.0, 0.1)
    assert config.loss_params().gamma == 2.0


@pytest.mark.parametrize("cls", [TrainConfig, DetectorConfig])
def test_text_round_trip(cls):
    config = cls(steps=123, seed=9)
    assert parse_config_text(cls, config_to_text(config)) == config


def test_file_round_trip(tmp_path):
    config = TrainConfig(lambda_prcp=0.3, distortion_strengths=(0.2, 0.1, 0.0, 0.5, 0.02))
    path = write_config(config, str(tmp_path / "cfg" / "train.cfg"))
    assert read_config(TrainConfig, path) == config


def test_comments_and_blank_lines():
    text = "# run\n\nsteps = 10  # short\nflip = false\n"
    assert parse_config_text(DetectorConfig, text).flip is False
    assert parse_config_text(TrainConfig, "steps = 10 # short\n").steps == 10


def test_unknown_key_names_the_line():
    with pytest.raises(ConfigError, match="line 2"):
        parse_config_text(TrainConfig, "steps = 10\nlearning_rate = 0.1\n")


@pytest.mark.parametrize("text", ["steps = ten", "flip = maybe", "steps 10"])
def test_malformed_values(text):
    cls = DetectorConfig if text.startswith("flip") else TrainConfig
    with pytest.raises(ConfigError):
        parse_config_text(cls, text)


@pytest.mark.parametrize("changes", [{"steps": -1}, {"batch_size": 0}, {"alpha": 1.5}, {"beta1": 1.0},
                                     {"crop_size": 80}, {"distortion_strengths": (0.1,)},
                                     {"ensemble_lambda_schedule": ()}])
def test_validation(changes):
    with pytest.raises(ConfigError):
        TrainConfig(**changes)


def test_detector_optimizer_choice():
    with pytest.raises(ConfigError):
        DetectorConfig(optimizer="sgd")


def test_override_skips_none():
    config = TrainConfig()
    assert override(config, steps=None) is config
    changed = override(config, steps=7, lambda_prcp=None)
    assert changed.steps == 7 and changed.lambda_prcp == config.lambda_prcp


def test_dict_round_trip_and_unknown_keys():
    config = DetectorConfig(backbone_channels=(4, 4, 8, 8))
    assert config_from_dict(DetectorConfig, config_to_dict(config)) == config
    with pytest.raises(ConfigError):
        config_from_dict(DetectorConfig, {"depth": 3})


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        read_config(TrainConfig, str(tmp_path / "absent.cfg"))
