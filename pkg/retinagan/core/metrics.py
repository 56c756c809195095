#!/usr/bin/env python3
"""
Detection and image metrics: mean average precision, PSNR, rate spreads.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .boxes import DecodedDetections, iou_matrix

logger = logging.getLogger(__name__)

GroundTruth = Tuple[np.ndarray, np.ndarray]  # (boxes [G, 4], classes [G])


@dataclass
class MapResult:
    map: float
    per_class: Dict[int, float] = field(default_factory=dict)
    gt_counts: Dict[int, int] = field(default_factory=dict)


def average_precision(recall: np.ndarray, precision: np.ndarray) -> float:
    """Area under the precision-recall curve with the monotone precision envelope (every point)."""
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    changes = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[changes + 1] - mrec[changes]) * mpre[changes + 1]))


def class_average_precision(detections: Sequence[DecodedDetections], ground_truth: Sequence[GroundTruth],
                            class_id: int, iou_threshold: float = 0.5) -> Tuple[float, int]:
    """AP of one class over a set of images; returns (ap, number of gt boxes)."""
    gt_boxes = []
    for boxes, classes in ground_truth:
        boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
        gt_boxes.append(boxes[np.asarray(classes) == class_id])
    num_gt = sum(len(b) for b in gt_boxes)
    if num_gt == 0:
        return 0.0, 0

    candidates = []
    for image_index, dets in enumerate(detections):
        for box, score, cls in zip(dets.boxes, dets.scores, dets.classes):
            if int(cls) == class_id:
                candidates.append((float(score), image_index, np.asarray(box, dtype=np.float64)))
    if not candidates:
        return 0.0, num_gt
    candidates.sort(key=lambda c: -c[0])

    matched = [np.zeros(len(b), dtype=bool) for b in gt_boxes]
    tp = np.zeros(len(candidates))
    for k, (_, image_index, box) in enumerate(candidates):
        gts = gt_boxes[image_index]
        if len(gts) == 0:
            continue
        overlaps = iou_matrix(box, gts)[0]
        overlaps[matched[image_index]] = -1.0
        best = int(np.argmax(overlaps))
        if overlaps[best] >= iou_threshold:
            matched[image_index][best] = True
            tp[k] = 1.0
    cum_tp = np.cumsum(tp)
    cum_fp = np.cumsum(1.0 - tp)
    recall = cum_tp / num_gt
    precision = cum_tp / (cum_tp + cum_fp)
    return average_precision(recall, precision), num_gt


def evaluate_map(detections: Sequence[DecodedDetections], ground_truth: Sequence[GroundTruth],
                 num_classes: int, iou_threshold: float = 0.5) -> MapResult:
    """
    Mean AP over the classes that have ground truth.

    Args:
        detections: One DecodedDetections per image
        ground_truth: Aligned (boxes, classes) per image, normalized boxes
        num_classes: Class count K
        iou_threshold: Match threshold

    Returns:
        MapResult; mAP is 0 when no class has ground truth
    """
    if len(detections) != len(ground_truth):
        raise ValueError(f"{len(detections)} detection sets for {len(ground_truth)} images")
    per_class, counts = {}, {}
    for k in range(num_classes):
        ap, n = class_average_precision(detections, ground_truth, k, iou_threshold)
        if n > 0:
            per_class[k] = ap
            counts[k] = n
    mean = float(np.mean(list(per_class.values()))) if per_class else 0.0
    return MapResult(map=mean, per_class=per_class, gt_counts=counts)


def psnr(a: np.ndarray, b: np.ndarray, cap: float = 100.0) -> float:
    """Peak signal-to-noise ratio for images in [0, 1], capped for identical inputs."""
    mse = float(np.mean((np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)) ** 2))
    if mse <= 0.0:
        return cap
    return min(cap, 10.0 * math.log10(1.0 / mse))


def rate_std(rate: float, n: int) -> float:
    """Bernoulli estimate sqrt(q(1-q)/(n-1)); 0 for fewer than two trials."""
    if n < 2:
        return 0.0
    return math.sqrt(max(rate * (1.0 - rate), 0.0) / (n - 1))


def mean_abs_diff(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.mean(np.abs(np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64))))
