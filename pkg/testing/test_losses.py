#!/usr/bin/env python3
"""Cross-entropy family, focal consistency, Huber box term and the perception aggregate."""

import math

import numpy as np
import pytest

from retinagan.core.boxes import HeadOutputs, LevelOutputs
from retinagan.core.detector import Detector
from retinagan.core.errors import ConfigError, LossInputError, ShapeError
from retinagan.core.losses import (LossParams, balanced_ce, balanced_weight, cross_entropy, fcl, fcl_class_term,
                                   focal_loss, full_prcp_loss, huber_box, pair_prcp_loss)
from retinagan.core.tensor_engine import Tensor, gradient_check, tsum


def scalar_huber(x, delta):
    return 0.5 * x * x / delta if abs(x) <= delta else abs(x) - 0.5 * delta


def scalar_fcl(y, p, gamma, alpha):
    ce = -(y * math.log(p) + (1 - y) * math.log(1 - p))
    return abs(y - p) ** gamma * ((2 * alpha - 1) * p + (1 - alpha)) * ce


def random_level(rng, n, anchors, classes, dtype="float64"):
    return LevelOutputs(cls_logits=Tensor(rng.normal(size=(n, anchors, classes)), requires_grad=True, dtype=dtype),
                        box_regression=Tensor(rng.normal(size=(n, anchors, 4)), requires_grad=True, dtype=dtype))


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


class TestCrossEntropy:
    def test_confident_correct_is_near_zero(self):
        assert cross_entropy(1.0, 1.0 - 1e-6).item() == pytest.approx(0.0, abs=1e-5)

    def test_fair_coin(self):
        assert cross_entropy(0.5, 0.5).item() == pytest.approx(math.log(2), rel=1e-5)

    def test_soft_target(self):
        assert cross_entropy(0.5, 0.9).item() == pytest.approx(1.20397, abs=1e-5)

    def test_probability_is_clamped(self):
        assert np.isfinite(cross_entropy(np.array([1.0, 0.0]), np.array([0.0, 1.0])).data).all()


class TestBalancedAndFocal:
    def test_balanced_weight_endpoints(self):
        assert balanced_weight(1.0, 0.25).item() == pytest.approx(0.25)
        assert balanced_weight(0.0, 0.25).item() == pytest.approx(0.75)
        assert balanced_weight(0.9, 0.25).item() == pytest.approx(0.3)

    def test_balanced_ce_scales_cross_entropy(self):
        assert balanced_ce(0.5, 0.9, 0.25).item() == pytest.approx(0.3 * 1.2039728, rel=1e-5)

    def test_focal_hard_positive(self):
        # (1 - 0.9)^2 * balanced weight 0.3 * -ln 0.9
        assert focal_loss(1.0, 0.9, 2.0, 0.25).item() == pytest.approx(0.01 * 0.3 * -math.log(0.9), rel=1e-4)
        assert focal_loss(1.0, 0.9, 2.0, 0.25).item() == pytest.approx(3.161e-4, abs=1e-6)

    def test_focal_rejects_soft_targets(self):
        with pytest.raises(LossInputError):
            focal_loss(np.array([0.5]), np.array([0.9]), 2.0, 0.25)

    def test_fcl_soft_target(self):
        assert fcl(0.5, 0.9, 2.0, 0.25).item() == pytest.approx(0.05779, abs=1e-5)

    def test_fcl_is_zero_at_agreement(self):
        p = np.linspace(0.05, 0.95, 7)
        np.testing.assert_array_equal(fcl(p, p, 2.0, 0.25).data, np.zeros(7))

    def test_fcl_equals_focal_on_hard_targets(self, float64):
        p = np.linspace(0.01, 0.99, 99)
        for y in (0.0, 1.0):
            targets = np.full_like(p, y)
            for gamma in (0.0, 0.5, 1.0, 2.0, 5.0):
                for alpha in (0.0, 0.25, 0.5, 1.0):
                    np.testing.assert_allclose(fcl(targets, p, gamma, alpha).data,
                                               focal_loss(targets, p, gamma, alpha).data, rtol=0, atol=1e-9)

    def test_fcl_without_focusing_is_balanced_ce(self, float64):
        rng = np.random.default_rng(0)
        y, p = rng.uniform(size=20), rng.uniform(0.01, 0.99, size=20)
        np.testing.assert_allclose(fcl(y, p, 0.0, 0.25).data, balanced_ce(y, p, 0.25).data, atol=1e-12)

    def test_fcl_gradient(self):
        rng = np.random.default_rng(1)
        y = rng.uniform(size=(3, 4))
        p = Tensor(rng.uniform(0.1, 0.9, size=(3, 4)), requires_grad=True, dtype="float64")
        assert gradient_check(lambda p: tsum(fcl(y, p, 2.0, 0.25)), [p]) <= 1e-4


class TestLossParams:
    @pytest.mark.parametrize("field,value", [("gamma", -1.0), ("alpha", 1.5), ("delta", 0.0),
                                             ("lambda_prcp", -0.1)])
    def test_invalid_values(self, field, value):
        with pytest.raises(ConfigError):
            LossParams(**{field: value})


class TestDetectionTerms:
    def test_fcl_class_term_matches_loop(self):
        rng = np.random.default_rng(2)
        ref = sigmoid(rng.normal(size=(1, 6, 2)))
        cmp = sigmoid(rng.normal(size=(1, 6, 2)))
        expected = sum(scalar_fcl(ref[0, a, k], cmp[0, a, k], 2.0, 0.25) for a in range(6) for k in range(2))
        expected /= max(ref.sum(), 1.0)
        got = fcl_class_term(Tensor(ref, dtype="float64"), Tensor(cmp, dtype="float64"), 2.0, 0.25).item()
        assert got == pytest.approx(expected, rel=1e-9)

    def test_fcl_class_term_shape_mismatch(self):
        with pytest.raises(ShapeError):
            fcl_class_term(Tensor(np.ones((1, 6, 2))), Tensor(np.ones((1, 5, 2))), 2.0, 0.25)

    def test_huber_box_matches_loop(self):
        rng = np.random.default_rng(3)
        ref, cmp = rng.normal(size=(2, 5, 4)) * 2, rng.normal(size=(2, 5, 4)) * 2
        weights = rng.uniform(size=(2, 5))
        total = sum(weights[n, a] * sum(scalar_huber(ref[n, a, c] - cmp[n, a, c], 1.0) for c in range(4))
                    for n in range(2) for a in range(5))
        expected = total / max(weights.sum(), 1.0)
        got = huber_box(Tensor(ref, dtype="float64"), Tensor(cmp, dtype="float64"), weights, 1.0).item()
        assert got == pytest.approx(expected, rel=1e-9)

    def test_huber_box_rejects_bad_weights(self):
        with pytest.raises(ShapeError):
            huber_box(Tensor(np.ones((1, 5, 4))), Tensor(np.ones((1, 5, 4))), np.ones((1, 4)), 1.0)

    def test_pair_loss_composes_levels(self):
        rng = np.random.default_rng(4)
        params = LossParams()
        a = HeadOutputs([random_level(rng, 1, 8, 2), random_level(rng, 1, 2, 2)])
        b = HeadOutputs([random_level(rng, 1, 8, 2), random_level(rng, 1, 2, 2)])
        expected = 0.0
        for ref, cmp in zip(a.levels, b.levels):
            p_ref, p_cmp = sigmoid(ref.cls_logits.data), sigmoid(cmp.cls_logits.data)
            expected += huber_box(ref.box_regression, cmp.box_regression, p_ref.max(axis=-1), 1.0).item()
            expected += fcl_class_term(Tensor(p_ref), Tensor(p_cmp), 2.0, 0.25).item()
        assert pair_prcp_loss(a, b, params).item() == pytest.approx(expected, rel=1e-9)

    def test_pair_loss_of_identical_outputs_is_zero(self):
        rng = np.random.default_rng(5)
        a = HeadOutputs([random_level(rng, 2, 8, 2), random_level(rng, 2, 2, 2)])
        assert pair_prcp_loss(a, a, LossParams()).item() == 0.0

    def test_pair_loss_rejects_different_grids(self):
        rng = np.random.default_rng(6)
        a = HeadOutputs([random_level(rng, 1, 8, 2)])
        b = HeadOutputs([random_level(rng, 1, 4, 2)])
        with pytest.raises(ShapeError):
            pair_prcp_loss(a, b, LossParams())

    def test_pair_loss_gradient(self):
        rng = np.random.default_rng(7)
        a = HeadOutputs([random_level(rng, 1, 6, 2)])
        b = HeadOutputs([random_level(rng, 1, 6, 2)])
        inputs = [a.levels[0].cls_logits, a.levels[0].box_regression, b.levels[0].cls_logits,
                  b.levels[0].box_regression]

        def loss(ca, ba, cb, bb):
            return pair_prcp_loss(HeadOutputs([LevelOutputs(ca, ba)]), HeadOutputs([LevelOutputs(cb, bb)]),
                                  LossParams())
        assert gradient_check(loss, inputs, points=30) <= 1e-4


class TestPerceptionAggregate:
    @pytest.fixture
    def detector64(self, tiny_detector_config):
        return Detector(tiny_detector_config, seed=0, dtype="float64").freeze()

    def images(self, seed):
        return Tensor(np.random.default_rng(seed).uniform(size=(1, 3, 32, 32)), dtype="float64")

    def test_identity_translation_gives_zero(self, detector64):
        x, y = self.images(0), self.images(1)
        loss = full_prcp_loss(x, x, x, y, y, y, detector64, LossParams())
        assert loss.item() == 0.0

    def test_equals_six_weighted_pairs(self, detector64):
        x, xt, xc, y, yt, yc = (self.images(s) for s in range(6))
        params = LossParams()
        terms = {}
        total = full_prcp_loss(x, xt, xc, y, yt, yc, detector64, params, terms=terms).item()

        def pair(a, b):
            return pair_prcp_loss(detector64.forward(a), detector64.forward(b), params).item()
        expected = (pair(x, xt) + 0.5 * pair(x, xc) + 0.5 * pair(xt, xc)
                    + pair(y, yt) + 0.5 * pair(y, yc) + 0.5 * pair(yt, yc))
        assert total == pytest.approx(expected, rel=1e-9)
        assert set(terms) == {"x_orig_trans", "x_orig_cycle", "x_trans_cycle",
                              "y_orig_trans", "y_orig_cycle", "y_trans_cycle"}
        assert terms["x_orig_trans"] == pytest.approx(pair(x, xt), rel=1e-9)

    def test_image_gradient_flows_through_frozen_detector(self, detector64):
        x = self.images(0)
        xt = Tensor(np.random.default_rng(9).uniform(size=(1, 3, 32, 32)), requires_grad=True, dtype="float64")

        def loss(xt):
            return pair_prcp_loss(detector64.forward(x), detector64.forward(xt), LossParams())
        assert gradient_check(loss, [xt], points=20) <= 1e-4
