#!/usr/bin/env python3
"""Micro-detector forward pass, training, freezing and persistence."""

import ast
import dataclasses
import math
import os

import numpy as np
import pytest

from retinagan.core import detector as detector_module
from retinagan.core.boxes import IGNORE, NEGATIVE, HeadOutputs, LevelOutputs, MatchTargets, match_anchors
from retinagan.core.detector import (Detector, detect_image, detector_training_loss, load_detector,
                                     save_detector, train_detector)
from retinagan.core.errors import DatasetError, FrozenModelError, ShapeError
from retinagan.core.losses import LossParams, focal_loss
from retinagan.core.tensor_engine import Tensor, gradient_check, sigmoid, tsum


def batch(n=2, size=32, seed=0):
    return Tensor(np.random.default_rng(seed).uniform(size=(n, 3, size, size)).astype(np.float32))


def test_head_output_shapes(tiny_detector):
    outputs = tiny_detector.forward(batch())
    assert outputs.level_shapes() == [((2, 48, 2), (2, 48, 4)), ((2, 12, 2), (2, 12, 4))]
    cls, box = outputs.numpy()
    assert cls.shape == (2, tiny_detector.grid.count, 2)
    assert box.shape == (2, 60, 4)


def test_rejects_wrong_input_size(tiny_detector):
    with pytest.raises(ShapeError):
        tiny_detector.forward(batch(size=64))


def test_class_prior_sets_initial_scores(tiny_detector_config):
    detector = Detector(tiny_detector_config, seed=0)
    cls, _ = detector.forward(batch()).numpy()
    probs = 1.0 / (1.0 + np.exp(-cls))
    assert abs(probs.mean() - tiny_detector_config.class_prior) < 0.01


def test_freeze_blocks_training(tiny_detector_config):
    detector = Detector(tiny_detector_config).freeze()
    assert detector.frozen
    assert not any(t.requires_grad for t in detector.params.tensors())
    with pytest.raises(FrozenModelError):
        detector.params.check_trainable()


def test_predict_returns_one_result_per_image(tiny_detector, tiny_images):
    pixels = np.stack([img.pixels for img in tiny_images["sim"]])
    detections = tiny_detector.predict(pixels)
    assert len(detections) == len(pixels)
    single = detect_image(tiny_detector, pixels[0])
    np.testing.assert_array_equal(single.scores, detections[0].scores)


def test_training_is_deterministic(tiny_detector_config, tiny_images):
    images = tiny_images["sim"] + tiny_images["real"]
    first = train_detector(tiny_detector_config, images)
    second = train_detector(tiny_detector_config, images)
    assert len(first.losses) == tiny_detector_config.steps
    assert first.losses == second.losses
    assert first.detector.parameter_hash() == second.detector.parameter_hash()
    assert first.detector.parameter_hash() != Detector(tiny_detector_config).parameter_hash()


def test_momentum_recipe_runs(tiny_detector_config, tiny_images):
    config = dataclasses.replace(tiny_detector_config, optimizer="momentum", lr=1e-3)
    result = train_detector(config, tiny_images["sim"], steps=2, seed=3)
    assert all(np.isfinite(result.losses))


def test_training_needs_images(tiny_detector_config):
    with pytest.raises(DatasetError):
        train_detector(tiny_detector_config, [])


def test_checkpoint_round_trip(tmp_path, tiny_detector):
    path = save_detector(tiny_detector, str(tmp_path / "det.rgan"), step=5)
    loaded = load_detector(path)
    assert loaded.frozen
    assert loaded.config == tiny_detector.config
    assert loaded.parameter_hash() == tiny_detector.parameter_hash()


def test_load_unfrozen(tmp_path, tiny_detector_config):
    path = save_detector(Detector(tiny_detector_config), str(tmp_path / "det.rgan"))
    assert not load_detector(path, freeze=False).frozen


def test_training_loss_gradient(tiny_detector_config, tiny_images):
    detector = Detector(tiny_detector_config, seed=1, dtype="float64")
    image = tiny_images["sim"][0]
    targets = [match_anchors(detector.grid, image.boxes, image.classes, 2)]
    x = Tensor(image.pixels.transpose(2, 0, 1)[None], dtype="float64")
    weight = detector.params["cls_out.w"]

    def loss(_):
        return detector_training_loss(detector.forward(x), targets)
    assert gradient_check(loss, [weight], points=20) <= 1e-4


def head(cls, box):
    return HeadOutputs(levels=[LevelOutputs(cls_logits=Tensor(np.asarray(cls, dtype=float)[None], dtype="float64"),
                                            box_regression=Tensor(np.asarray(box, dtype=float)[None],
                                                                  dtype="float64"))])


def targets(assignment, class_targets, box_targets):
    assignment = np.array(assignment)
    return MatchTargets(assignment=assignment, box_targets=np.array(box_targets, dtype=float),
                        class_targets=np.array(class_targets, dtype=float), max_iou=np.zeros(len(assignment)))


def focal_by_hand(y, logit, gamma=2.0, alpha=0.25):
    p = 1.0 / (1.0 + math.exp(-logit))
    pc = min(max(p, 1e-7), 1.0 - 1e-7)
    ce = -(y * math.log(pc) + (1 - y) * math.log(1 - pc))
    p_t = p if y == 1 else 1.0 - p
    return (1.0 - p_t) ** gamma * ((2 * alpha - 1) * p + (1 - alpha)) * ce


def huber_by_hand(x, delta=1.0):
    return 0.5 * x * x / delta if abs(x) <= delta else abs(x) - 0.5 * delta


class TestTrainingLoss:
    # anchor 0 positive (class 1), anchor 1 negative, anchor 2 ignored
    CLS = [[0.3, -1.2], [2.0, -0.5], [5.0, 5.0]]
    BOX = [[0.4, -1.5, 0.1, 0.0], [3.0, 3.0, 3.0, 3.0], [-2.0, 1.0, 0.5, 0.5]]
    TARGETS = ([0, NEGATIVE, IGNORE], [[0, 1], [0, 0], [0, 0]],
               [[0.1, -0.2, 0.3, 0.0], [0, 0, 0, 0], [0, 0, 0, 0]])

    def test_matches_hand_computation(self):
        loss = detector_training_loss(head(self.CLS, self.BOX), [targets(*self.TARGETS)], LossParams()).item()
        _, class_targets, box_targets = self.TARGETS
        expected = sum(focal_by_hand(class_targets[a][k], self.CLS[a][k]) for a in (0, 1) for k in (0, 1))
        expected += sum(huber_by_hand(self.BOX[0][j] - box_targets[0][j]) for j in range(4))
        assert loss == pytest.approx(expected, rel=1e-10)

    def test_perfect_logits_give_zero(self):
        _, class_targets, box_targets = self.TARGETS
        logits = [[40.0 if y else -40.0 for y in row] for row in class_targets]
        loss = detector_training_loss(head(logits, box_targets), [targets(*self.TARGETS)], LossParams()).item()
        assert loss == pytest.approx(0.0, abs=1e-12)

    def test_no_positives_drops_the_box_term(self):
        empty = targets([NEGATIVE] * 3, np.zeros((3, 2)), np.zeros((3, 4)))
        with_boxes = detector_training_loss(head(self.CLS, self.BOX), [empty]).item()
        without = detector_training_loss(head(self.CLS, np.zeros((3, 4))), [empty]).item()
        assert with_boxes == without
        # normalizer floors at one
        expected = sum(focal_by_hand(0, logit) for row in self.CLS for logit in row)
        assert with_boxes == pytest.approx(expected, rel=1e-10)

    def test_class_term_is_summed_focal_over_positives(self):
        assignment = [0, 1, NEGATIVE]
        class_targets = [[1, 0], [0, 1], [0, 0]]
        box_targets = [[0.1, 0.1, 0.0, 0.0], [0.2, -0.3, 0.1, 0.1], [0, 0, 0, 0]]
        loss = detector_training_loss(head(self.CLS, box_targets),
                                      [targets(assignment, class_targets, box_targets)]).item()
        probs = sigmoid(Tensor(np.array(self.CLS), dtype="float64"))
        summed = tsum(focal_loss(np.array(class_targets, dtype=float), probs, 2.0, 0.25)).item()
        assert loss == pytest.approx(summed / 2.0, rel=1e-10)


def test_model_modules_do_not_import_scene_synthesis():
    core_dir = os.path.dirname(detector_module.__file__)
    for name in ("boxes", "detector", "evaluation", "gan_nets", "images", "losses"):
        with open(os.path.join(core_dir, f"{name}.py"), "r", encoding="utf-8") as f:
            tree = ast.parse(f.read())
        modules = [node.module or "" for node in ast.walk(tree) if isinstance(node, ast.ImportFrom)]
        modules += [alias.name for node in ast.walk(tree) if isinstance(node, ast.Import) for alias in node.names]
        assert not [m for m in modules if m.startswith("scene_synth")], name
