#!/usr/bin/env python3
"""
Consistency Losses
Cross-entropy family, focal and focal-consistency losses, Huber box
consistency, and the perception-consistency aggregate over image sextets.

Probability losses are elementwise and return tensors shaped like their
inputs; the detector-level terms reduce to scalars.
"""

import logging
from dataclasses import dataclass
from typing import Dict, Optional, Tuple, Union

import numpy as np

from .boxes import HeadOutputs, LevelOutputs
from .errors import ConfigError, LossInputError, ShapeError
from .tensor_engine import Tensor, absolute, as_tensor, clip, huber, log, sigmoid, tmax, tsum

logger = logging.getLogger(__name__)

P_MIN = 1e-7
P_MAX = 1.0 - 1e-7
NORMALIZER_FLOOR = 1.0

Value = Union[Tensor, np.ndarray, float]


@dataclass
class LossParams:
    """Loss exponents and weights shared by detection training and GAN training."""
    gamma: float = 2.0
    alpha: float = 0.25
    delta: float = 1.0
    lambda_prcp: float = 0.1
    lambda_cycle: float = 10.0
    lambda_gan: float = 1.0

    def __post_init__(self):
        if self.gamma < 0:
            raise ConfigError(f"gamma must be >= 0, got {self.gamma}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.delta <= 0:
            raise ConfigError(f"delta must be > 0, got {self.delta}")
        for name in ("lambda_prcp", "lambda_cycle", "lambda_gan"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")


def _pair(y: Value, p: Value) -> Tuple[Tensor, Tensor]:
    p_t = as_tensor(p)
    y_t = as_tensor(y, p_t)
    return y_t, p_t


def clamp_probability(p: Tensor) -> Tensor:
    return clip(p, lo=P_MIN, hi=P_MAX)


def cross_entropy(y: Value, p: Value) -> Tensor:
    """-y log p - (1-y) log(1-p) with p clamped to [1e-7, 1-1e-7]."""
    y, p = _pair(y, p)
    pc = clamp_probability(p)
    return -(y * log(pc) + (1.0 - y) * log(1.0 - pc))


def balanced_weight(p: Value, alpha: float) -> Tensor:
    """(2*alpha - 1) * p + (1 - alpha): alpha at p = 1, 1 - alpha at p = 0."""
    # weights the predicted p, not the target: focal_loss(y=1, p=0.9, gamma=2, alpha=0.25)
    # is 0.01 * 0.30 * 0.10536 = 3.161e-4, where an alpha_t weight would give 2.634e-4
    return (2.0 * alpha - 1.0) * as_tensor(p) + (1.0 - alpha)


def balanced_ce(y: Value, p: Value, alpha: float) -> Tensor:
    y, p = _pair(y, p)
    return balanced_weight(p, alpha) * cross_entropy(y, p)


def focal_loss(y: Value, p: Value, gamma: float, alpha: float) -> Tensor:
    """(1 - p_t)^gamma * balanced_ce for hard targets, p_t = p where y = 1 and 1 - p where y = 0."""
    y, p = _pair(y, p)
    if not np.all((y.data == 0.0) | (y.data == 1.0)):
        raise LossInputError("focal_loss needs binary targets; use fcl for probability targets")
    p_t = y * p + (1.0 - y) * (1.0 - p)
    return (1.0 - p_t) ** gamma * balanced_ce(y, p, alpha)


def fcl(y: Value, p: Value, gamma: float, alpha: float) -> Tensor:
    """Focal consistency loss |y - p|^gamma * balanced_ce(y, p) for targets in [0, 1]."""
    y, p = _pair(y, p)
    return absolute(y - p) ** gamma * balanced_ce(y, p, alpha)


def _check_same_shape(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{what}: reference shape {a.shape} does not match comparand {b.shape}")


def fcl_class_term(cls_ref: Tensor, cls_cmp: Tensor, gamma: float, alpha: float,
                   floor: float = NORMALIZER_FLOOR) -> Tensor:
    """
    Summed FCL of comparand probabilities against reference probabilities,
    normalized by the reference probability mass (floored at 1.0).
    """
    _check_same_shape(cls_ref, cls_cmp, "fcl_class_term")
    total = tsum(fcl(cls_ref, cls_cmp, gamma, alpha))
    return total / clip(tsum(cls_ref), lo=floor)


def huber_box(box_ref: Tensor, box_cmp: Tensor, weights: Value, delta: float,
              floor: float = NORMALIZER_FLOOR) -> Tensor:
    """Per-anchor weighted Huber distance between box regressions, normalized by total weight."""
    _check_same_shape(box_ref, box_cmp, "huber_box")
    w = as_tensor(weights, box_ref)
    if w.shape != box_ref.shape[:-1]:
        raise ShapeError(f"huber_box: weights {w.shape} do not cover anchors {box_ref.shape[:-1]}")
    per_anchor = tsum(huber(box_ref - box_cmp, delta), axis=-1)
    return tsum(w * per_anchor) / clip(tsum(w), lo=floor)


def level_prcp_loss(ref: LevelOutputs, cmp: LevelOutputs, params: LossParams) -> Tensor:
    p_ref = sigmoid(ref.cls_logits)
    p_cmp = sigmoid(cmp.cls_logits)
    weights = tmax(p_ref, axis=-1)
    box_term = huber_box(ref.box_regression, cmp.box_regression, weights, params.delta)
    return box_term + fcl_class_term(p_ref, p_cmp, params.gamma, params.alpha)


def pair_prcp_loss(a: HeadOutputs, b: HeadOutputs, params: LossParams) -> Tensor:
    """
    Detection consistency of comparand `b` against reference `a`, summed over
    pyramid levels. Not symmetric: the reference supplies targets, box weights
    and normalizers.
    """
    if a.level_shapes() != b.level_shapes():
        raise ShapeError(f"pair_prcp_loss: anchor grids differ {a.level_shapes()} vs {b.level_shapes()}")
    total = None
    for ref, cmp in zip(a.levels, b.levels):
        term = level_prcp_loss(ref, cmp, params)
        total = term if total is None else total + term
    return total


# (reference index, comparand index, weight) within a triple (original, translated, cycled)
SEXTET_PAIRS = ((0, 1, 1.0), (0, 2, 0.5), (1, 2, 0.5))


def triple_prcp_loss(outputs: Tuple[HeadOutputs, HeadOutputs, HeadOutputs], params: LossParams,
                     terms: Optional[Dict[str, float]] = None, tag: str = "") -> Tensor:
    """L(o, t) + 1/2 L(o, c) + 1/2 L(t, c) for one (original, translated, cycled) triple."""
    names = ("orig", "trans", "cycle")
    total = None
    for ref, cmp, weight in SEXTET_PAIRS:
        term = pair_prcp_loss(outputs[ref], outputs[cmp], params)
        if terms is not None:
            terms[f"{tag}{names[ref]}_{names[cmp]}"] = term.item()
        term = term * weight if weight != 1.0 else term
        total = term if total is None else total + term
    return total


def full_prcp_loss(x: Tensor, x_trans: Tensor, x_cycle: Tensor, y: Tensor, y_trans: Tensor,
                   y_cycle: Tensor, detector, params: LossParams,
                   terms: Optional[Dict[str, float]] = None) -> Tensor:
    """
    Six-term perception consistency over (x, G(x), F(G(x))) and (y, F(y), G(F(y))).

    Args:
        x, x_trans, x_cycle: Sim batch, its translation and its reconstruction
        y, y_trans, y_cycle: Real batch, its translation and its reconstruction
        detector: Frozen detector exposing forward(images) -> HeadOutputs
        params: Loss parameters
        terms: Optional dict receiving each unweighted pair value

    Returns:
        Scalar tensor; halved weights on pairs involving the cycled images
    """
    # separate forwards: identical inputs must give bit-identical outputs
    x_out = [detector.forward(t) for t in (x, x_trans, x_cycle)]
    y_out = [detector.forward(t) for t in (y, y_trans, y_cycle)]
    return (triple_prcp_loss(tuple(x_out), params, terms, "x_")
            + triple_prcp_loss(tuple(y_out), params, terms, "y_"))
