#!/usr/bin/env python3
"""Detection consistency, ground-truth preservation, domain realism and report emission."""

import numpy as np
import pandas as pd
import pytest
from PIL import Image

from retinagan.core.boxes import DecodedDetections
from retinagan.core.errors import EvaluationError, ShapeError
from retinagan.core.evaluation import (DomainClassifier, EvalReport, consistency_from_detections,
                                       detection_consistency, domain_score, emit_report, evaluate, greedy_match,
                                       gt_preservation, overlay_strip, read_report, train_domain_classifier)
from retinagan.core.gan_nets import IdentityGenerator
from retinagan.core.tensor_engine import Tensor


def dets(boxes, classes, scores=None):
    boxes = np.array(boxes, dtype=float).reshape(-1, 4)
    scores = np.linspace(0.9, 0.5, len(boxes)) if scores is None else np.array(scores, dtype=float)
    return DecodedDetections(boxes=boxes, scores=scores, classes=np.array(classes, dtype=np.int64))


def pixels_of(images):
    return np.stack([img.pixels for img in images])


class TestConsistency:
    def test_greedy_match_prefers_highest_overlap(self):
        a = np.array([[0.0, 0.0, 0.5, 0.5], [0.0, 0.0, 0.6, 0.6]])
        b = np.array([[0.0, 0.0, 0.6, 0.6]])
        pairs = greedy_match(a, b)
        assert [(i, j) for i, j, _ in pairs] == [(1, 0)]
        assert pairs[0][2] == pytest.approx(1.0)

    def test_greedy_match_threshold_and_empty(self):
        assert greedy_match(np.array([[0, 0, 0.2, 0.2]]), np.array([[0.5, 0.5, 1, 1]])) == []
        assert greedy_match(np.zeros((0, 4)), np.array([[0, 0, 1, 1]])) == []

    def test_shifted_box(self):
        original = dets([[0.0, 0.0, 0.5, 0.5]], [1])
        shifted = dets([[0.0, 0.1, 0.5, 0.6]], [1])
        miou, agreement, per_image = consistency_from_detections([original], [shifted])
        assert miou == pytest.approx(0.2 / 0.3)
        assert agreement == 1.0
        assert per_image[0].matched == 1

    def test_unmatched_detections_count_as_zero(self):
        original = dets([[0.0, 0.0, 0.5, 0.5], [0.5, 0.5, 1.0, 1.0]], [0, 1])
        translated = dets([[0.0, 0.0, 0.5, 0.5]], [2])
        miou, agreement, _ = consistency_from_detections([original], [translated])
        assert miou == pytest.approx(0.5)
        assert agreement == 0.0

    def test_nothing_fires_is_trivially_consistent(self):
        assert consistency_from_detections([DecodedDetections()], [DecodedDetections()])[:2] == (1.0, 1.0)

    def test_empty_or_misaligned(self):
        with pytest.raises(EvaluationError):
            consistency_from_detections([], [])
        with pytest.raises(EvaluationError):
            consistency_from_detections([DecodedDetections()], [])

    def test_identity_translation_is_fully_consistent(self, tiny_detector, tiny_images):
        images = tiny_images["sim"]
        assert detection_consistency(tiny_detector, images, pixels_of(images)) == (1.0, 1.0)
        with pytest.raises(EvaluationError):
            detection_consistency(tiny_detector, [], [])

    def test_gt_preservation_range(self, tiny_detector, tiny_images):
        score = gt_preservation(tiny_detector, tiny_images["sim"])
        assert 0.0 <= score <= 1.0
        assert gt_preservation(tiny_detector, []) == 0.0


class TestDomainRealism:
    def test_classifier_output(self):
        classifier = DomainClassifier(image_size=32, channels=(4, 4, 8, 8))
        probs = classifier.forward(Tensor(np.random.default_rng(0).uniform(size=(3, 3, 32, 32))))
        assert probs.shape == (3, 1)
        assert ((probs.data > 0) & (probs.data < 1)).all()
        with pytest.raises(ShapeError):
            classifier.forward(Tensor(np.zeros((1, 3, 16, 16))))

    def test_training_reports_validation_accuracy(self, tiny_images):
        sim, real = pixels_of(tiny_images["sim"]), pixels_of(tiny_images["real"])
        classifier, accuracy = train_domain_classifier(sim, real, steps=3, batch_size=4, channels=(4, 4, 8, 8))
        assert 0.0 <= accuracy <= 1.0
        assert classifier.predict_real(sim).shape == (len(sim),)

    def test_needs_two_images_per_domain(self, tiny_images):
        with pytest.raises(EvaluationError):
            train_domain_classifier(pixels_of(tiny_images["sim"])[:1], pixels_of(tiny_images["real"]))

    def test_underfit_classifier_flags_score_invalid(self, tiny_images):
        classifier = DomainClassifier(image_size=32, channels=(4, 4, 8, 8))
        translated = pixels_of(tiny_images["sim"])
        score = domain_score(None, None, translated, classifier=(classifier, 0.6))
        assert not score.valid
        assert score.val_accuracy == 0.6
        assert score.n_images == len(translated)
        assert 0.0 <= score.score <= 1.0
        assert domain_score(None, None, translated, classifier=(classifier, 0.95)).valid

    def test_empty_translation_set(self):
        with pytest.raises(EvaluationError):
            domain_score(None, None, np.zeros((0, 32, 32, 3)), classifier=(DomainClassifier(32), 1.0))


class TestReports:
    def report(self):
        return EvalReport(consistency_miou=0.8, class_agreement=0.7, gt_map_translated=0.6, gt_map_source=0.65,
                          domain_score=0.9, domain_score_std=0.03, domain_val_accuracy=0.95,
                          rate_std={"domain_score": 0.03}, records=[{"index": 0, "psnr": 30.5}])

    def test_overlay_strip_is_three_panels_wide(self):
        image = np.random.default_rng(0).uniform(size=(32, 32, 3))
        strip = overlay_strip(image, image, dets([[0.1, 0.1, 0.5, 0.5]], [0]))
        assert strip.size == (96, 32)

    def test_emit_and_read_back(self, tmp_path):
        image = np.zeros((16, 16, 3))
        overlays = [(image, image, DecodedDetections())] * 10
        paths = emit_report(self.report(), str(tmp_path), overlays, max_overlays=8)

        summary = pd.read_csv(paths["csv"])
        assert list(summary.columns) == ["metric", "value"]
        assert len(summary) == 6
        assert summary.set_index("metric").loc["domain_score", "value"] == pytest.approx(0.9)

        assert len(paths["overlays"]) == 8
        with Image.open(paths["overlays"][0]) as strip:
            assert strip.size == (48, 16)
        assert read_report(str(tmp_path)) == self.report()

    def test_metrics_keys(self):
        assert set(self.report().metrics()) == {"consistency_miou", "class_agreement", "gt_map_translated",
                                                "gt_map_source", "domain_score", "domain_val_accuracy"}


class TestEvaluate:
    def test_identity_generator_end_to_end(self, tmp_path, tiny_detector, tiny_images):
        data, paired = tiny_images["sim"], tiny_images["paired"]
        report, overlays = evaluate(tiny_detector, IdentityGenerator(image_size=32), data, paired,
                                    classifier_steps=2)
        assert report.consistency_miou == 1.0 and report.class_agreement == 1.0
        assert report.gt_map_translated == pytest.approx(report.gt_map_source)
        assert len(report.records) == len(data)
        assert all(r["psnr"] == 100.0 for r in report.records)
        assert report.config["paired_images"] == len(paired)
        assert len(overlays) == len(data)
        paths = emit_report(report, str(tmp_path), overlays)
        assert len(paths["overlays"]) == len(data)

    def test_empty_data(self, tiny_detector, tiny_images):
        with pytest.raises(EvaluationError):
            evaluate(tiny_detector, IdentityGenerator(image_size=32), [], tiny_images["paired"])
