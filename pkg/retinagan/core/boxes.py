#!/usr/bin/env python3
"""
Anchor Geometry for the micro-detector
Anchors, IoU, anchor matching, box encoding and greedy NMS decoding.

Boxes are (ymin, xmin, ymax, xmax). Ground truth and decoded detections are
normalized to [0, 1]; anchors and encodings work in pixels.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import BoxError, ShapeError
from .tensor_engine import Tensor

logger = logging.getLogger(__name__)

NEGATIVE = -1
IGNORE = -2


@dataclass
class AnchorLevel:
    stride: int
    rows: int
    cols: int
    anchors: np.ndarray  # [rows*cols*ratios, 4] as (cy, cx, h, w), order (i, j, ratio)

    @property
    def count(self) -> int:
        return int(self.anchors.shape[0])


@dataclass
class AnchorGrid:
    image_size: int
    strides: Tuple[int, ...]
    ratios: Tuple[float, ...]
    levels: List[AnchorLevel]

    @property
    def count(self) -> int:
        return sum(level.count for level in self.levels)

    @property
    def per_location(self) -> int:
        return len(self.ratios)

    def all_anchors(self) -> np.ndarray:
        return np.concatenate([level.anchors for level in self.levels], axis=0)

    def level_slices(self) -> List[slice]:
        out, start = [], 0
        for level in self.levels:
            out.append(slice(start, start + level.count))
            start += level.count
        return out


def build_anchors(image_size: int, strides: Sequence[int] = (8, 16),
                  ratios: Sequence[float] = (0.5, 1.0, 2.0), scale: float = 2.0) -> AnchorGrid:
    """
    Anchors for every feature-map location of every pyramid level.

    Args:
        image_size: Square input side in pixels
        strides: Pyramid strides
        ratios: Height/width aspect ratios
        scale: Anchor side as a multiple of the stride (area preserved across ratios)

    Returns:
        AnchorGrid with (H/s)*(W/s)*len(ratios) anchors per level
    """
    strides = tuple(int(s) for s in strides)
    if image_size <= 0 or image_size % max(strides) != 0:
        raise ShapeError(f"image size {image_size} is not divisible by the largest stride {max(strides)}")
    levels = []
    for stride in strides:
        n = image_size // stride
        side = scale * stride
        centers = (np.arange(n) + 0.5) * stride
        cy, cx = np.meshgrid(centers, centers, indexing="ij")
        per_ratio = []
        for r in ratios:
            h = side * np.sqrt(r)
            w = side / np.sqrt(r)
            per_ratio.append(np.stack([cy, cx, np.full_like(cy, h), np.full_like(cx, w)], axis=-1))
        anchors = np.stack(per_ratio, axis=2).reshape(-1, 4)
        levels.append(AnchorLevel(stride=stride, rows=n, cols=n, anchors=anchors))
    return AnchorGrid(image_size=image_size, strides=strides, ratios=tuple(float(r) for r in ratios),
                      levels=levels)


def anchors_to_corners(anchors: np.ndarray) -> np.ndarray:
    cy, cx, h, w = anchors[:, 0], anchors[:, 1], anchors[:, 2], anchors[:, 3]
    return np.stack([cy - h / 2, cx - w / 2, cy + h / 2, cx + w / 2], axis=-1)


def box_area(boxes: np.ndarray) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64)
    return np.clip(boxes[..., 2] - boxes[..., 0], 0, None) * np.clip(boxes[..., 3] - boxes[..., 1], 0, None)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU, shape [len(a), len(b)]."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    top = np.maximum(a[:, None, 0], b[None, :, 0])
    left = np.maximum(a[:, None, 1], b[None, :, 1])
    bottom = np.minimum(a[:, None, 2], b[None, :, 2])
    right = np.minimum(a[:, None, 3], b[None, :, 3])
    inter = np.clip(bottom - top, 0, None) * np.clip(right - left, 0, None)
    union = box_area(a)[:, None] + box_area(b)[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def iou(a: Sequence[float], b: Sequence[float]) -> float:
    return float(iou_matrix(np.asarray(a), np.asarray(b))[0, 0])


def validate_boxes(boxes: np.ndarray, normalized: bool = True) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    if len(boxes) == 0:
        return boxes
    if not np.all(np.isfinite(boxes)):
        raise BoxError("box coordinates must be finite")
    degenerate = np.nonzero((boxes[:, 2] <= boxes[:, 0]) | (boxes[:, 3] <= boxes[:, 1]))[0]
    if len(degenerate):
        raise BoxError(f"degenerate box {boxes[degenerate[0]].tolist()} (zero or negative area)")
    if normalized and (boxes.min() < 0.0 or boxes.max() > 1.0):
        raise BoxError("normalized box coordinates must lie in [0, 1]")
    return boxes


def encode_boxes(corners: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    """(ymin,xmin,ymax,xmax) pixels -> (dy, dx, dh, dw) relative to (cy,cx,h,w) anchors."""
    h = corners[:, 2] - corners[:, 0]
    w = corners[:, 3] - corners[:, 1]
    cy = corners[:, 0] + h / 2
    cx = corners[:, 1] + w / 2
    return np.stack([(cy - anchors[:, 0]) / anchors[:, 2],
                     (cx - anchors[:, 1]) / anchors[:, 3],
                     np.log(h / anchors[:, 2]),
                     np.log(w / anchors[:, 3])], axis=-1)


def decode_boxes(deltas: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    """Inverse of encode_boxes; returns pixel corners."""
    deltas = np.asarray(deltas, dtype=np.float64)
    cy = deltas[:, 0] * anchors[:, 2] + anchors[:, 0]
    cx = deltas[:, 1] * anchors[:, 3] + anchors[:, 1]
    h = np.exp(np.clip(deltas[:, 2], -10, 10)) * anchors[:, 2]
    w = np.exp(np.clip(deltas[:, 3], -10, 10)) * anchors[:, 3]
    return np.stack([cy - h / 2, cx - w / 2, cy + h / 2, cx + w / 2], axis=-1)


@dataclass
class MatchTargets:
    """Per-anchor training targets for one image."""
    assignment: np.ndarray    # [A] gt index, NEGATIVE or IGNORE
    box_targets: np.ndarray   # [A, 4], zero except for positives
    class_targets: np.ndarray  # [A, K] one-hot for positives
    max_iou: np.ndarray       # [A]

    @property
    def positive(self) -> np.ndarray:
        return self.assignment >= 0

    @property
    def ignored(self) -> np.ndarray:
        return self.assignment == IGNORE

    @property
    def num_positive(self) -> int:
        return int(self.positive.sum())


def match_anchors(grid: AnchorGrid, gt_boxes: np.ndarray, gt_classes: Sequence[int], num_classes: int,
                  positive_iou: float = 0.5, negative_iou: float = 0.4) -> MatchTargets:
    """
    Assign each anchor to a ground-truth box, to background or to ignore.

    Positive at max IoU >= positive_iou, negative below negative_iou, ignored
    in between. Every gt with positive overlap additionally claims its
    best anchor (later gts win ties for the same anchor).
    """
    gt = validate_boxes(gt_boxes)
    classes = np.asarray(list(gt_classes), dtype=np.int64)
    if len(classes) != len(gt):
        raise BoxError(f"{len(gt)} boxes but {len(classes)} classes")
    if len(classes) and (classes.min() < 0 or classes.max() >= num_classes):
        raise BoxError(f"class ids must lie in [0, {num_classes})")

    anchors = grid.all_anchors()
    count = len(anchors)
    assignment = np.full(count, NEGATIVE, dtype=np.int64)
    box_targets = np.zeros((count, 4))
    class_targets = np.zeros((count, num_classes))
    if len(gt) == 0:
        return MatchTargets(assignment, box_targets, class_targets, np.zeros(count))

    gt_pixels = gt * grid.image_size
    overlaps = iou_matrix(anchors_to_corners(anchors), gt_pixels)
    max_iou = overlaps.max(axis=1)
    best_gt = overlaps.argmax(axis=1)
    assignment[max_iou >= negative_iou] = IGNORE
    positive = max_iou >= positive_iou
    assignment[positive] = best_gt[positive]
    for g in range(len(gt)):
        column = overlaps[:, g]
        if column.max() > 0:
            assignment[int(column.argmax())] = g

    pos = np.nonzero(assignment >= 0)[0]
    box_targets[pos] = encode_boxes(gt_pixels[assignment[pos]], anchors[pos])
    class_targets[pos, classes[assignment[pos]]] = 1.0
    return MatchTargets(assignment, box_targets, class_targets, max_iou)


@dataclass
class LevelOutputs:
    cls_logits: Tensor  # [N, A_level, K]
    box_regression: Tensor  # [N, A_level, 4]


@dataclass
class HeadOutputs:
    """Raw detector head outputs, one entry per pyramid level."""
    levels: List[LevelOutputs]

    @property
    def batch_size(self) -> int:
        return self.levels[0].cls_logits.shape[0]

    def level_shapes(self) -> List[Tuple[Tuple[int, ...], Tuple[int, ...]]]:
        return [(lv.cls_logits.shape, lv.box_regression.shape) for lv in self.levels]

    def numpy(self) -> Tuple[np.ndarray, np.ndarray]:
        """Concatenated (class logits [N, A, K], box regressions [N, A, 4])."""
        cls = np.concatenate([lv.cls_logits.data for lv in self.levels], axis=1)
        box = np.concatenate([lv.box_regression.data for lv in self.levels], axis=1)
        return cls, box


@dataclass
class DecodedDetections:
    boxes: np.ndarray = field(default_factory=lambda: np.zeros((0, 4)))
    scores: np.ndarray = field(default_factory=lambda: np.zeros(0))
    classes: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __len__(self) -> int:
        return int(len(self.scores))

    def to_dict(self) -> Dict[str, list]:
        return {"boxes": [[float(c) for c in b] for b in self.boxes],
                "scores": [float(s) for s in self.scores],
                "classes": [int(c) for c in self.classes]}


def nms(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float) -> List[int]:
    """Greedy NMS; returns kept indices in descending score order."""
    order = list(np.argsort(-np.asarray(scores), kind="stable"))
    keep: List[int] = []
    overlaps = iou_matrix(boxes, boxes)
    while order:
        best = order.pop(0)
        keep.append(int(best))
        order = [i for i in order if overlaps[best, i] < iou_threshold]
    return keep


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return np.exp(-np.logaddexp(0, -x))


def decode_nms(outputs: HeadOutputs, grid: AnchorGrid, score_thresh: float = 0.05, nms_iou: float = 0.5,
               max_det: int = 20) -> List[DecodedDetections]:
    """
    Score threshold, box decoding and per-class greedy NMS for every image in the batch.

    Returns:
        One DecodedDetections per image, scores descending, at most max_det entries
    """
    cls_logits, box_reg = outputs.numpy()
    if cls_logits.shape[1] != grid.count:
        raise ShapeError(f"head outputs cover {cls_logits.shape[1]} anchors, grid has {grid.count}")
    anchors = grid.all_anchors()
    results = []
    for n in range(cls_logits.shape[0]):
        probs = _sigmoid(cls_logits[n].astype(np.float64))
        corners = np.clip(decode_boxes(box_reg[n], anchors) / grid.image_size, 0.0, 1.0)
        kept_boxes, kept_scores, kept_classes = [], [], []
        for k in range(probs.shape[1]):
            candidates = np.nonzero(probs[:, k] > score_thresh)[0]
            candidates = candidates[box_area(corners[candidates]) > 0]
            if len(candidates) == 0:
                continue
            keep = nms(corners[candidates], probs[candidates, k], nms_iou)
            chosen = candidates[keep]
            kept_boxes.append(corners[chosen])
            kept_scores.append(probs[chosen, k])
            kept_classes.append(np.full(len(chosen), k, dtype=np.int64))
        if not kept_scores:
            results.append(DecodedDetections())
            continue
        boxes = np.concatenate(kept_boxes)
        scores = np.concatenate(kept_scores)
        classes = np.concatenate(kept_classes)
        order = np.argsort(-scores, kind="stable")[:max_det]
        results.append(DecodedDetections(boxes=boxes[order], scores=scores[order], classes=classes[order]))
    return results
