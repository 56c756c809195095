#!/usr/bin/env python3
"""
Shared fixtures: tiny scenes, tiny networks and on-disk datasets small
enough for the whole suite to run on a laptop CPU.
"""

import os
import sys

import pytest

sys.path.append(os.path.join(os.path.dirname(os.path.abspath(__file__)), '..'))

from retinagan.core.config import DetectorConfig, TrainConfig
from retinagan.core.detector import Detector, save_detector
from retinagan.core.tensor_engine import precision
from scene_synth.dataset_io import generate_corpus, load_dataset
from scene_synth.scene_generator import SceneConfig

TINY_SIZE = 32


@pytest.fixture
def float64():
    with precision("float64"):
        yield


@pytest.fixture
def tiny_scene_config():
    return SceneConfig(image_size=TINY_SIZE, num_classes=2, min_objects=1, max_objects=2,
                       min_size=0.3, max_size=0.45)


@pytest.fixture
def tiny_detector_config():
    return DetectorConfig(image_size=TINY_SIZE, num_classes=2, backbone_channels=(4, 4, 8, 8), fpn_width=8,
                          head_width=8, steps=2, batch_size=2, log_every=1000)


@pytest.fixture
def tiny_train_config():
    return TrainConfig(steps=2, batch_size=2, image_size=TINY_SIZE, crop_size=28, generator_base=4,
                       discriminator_base=4, checkpoint_every=1000, log_every=1000)


@pytest.fixture
def tiny_detector(tiny_detector_config):
    return Detector(tiny_detector_config, seed=0).freeze()


@pytest.fixture(scope="session")
def tiny_datasets(tmp_path_factory):
    """Four sim, four real and four paired (eight records) images at 32 x 32."""
    root = tmp_path_factory.mktemp("datasets")
    config = SceneConfig(image_size=TINY_SIZE, num_classes=2, min_objects=1, max_objects=2,
                         min_size=0.3, max_size=0.45)
    paths = {}
    for style in ("sim", "real", "paired"):
        paths[style] = str(root / style)
        generate_corpus(paths[style], 4, 0, style, config)
    return paths


@pytest.fixture
def tiny_images(tiny_datasets):
    return {style: load_dataset(path) for style, path in tiny_datasets.items()}


@pytest.fixture
def detector_checkpoint(tmp_path, tiny_detector):
    return save_detector(tiny_detector, str(tmp_path / "detector.rgan"))
