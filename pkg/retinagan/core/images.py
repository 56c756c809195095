#!/usr/bin/env python3
"""
Labeled Images
The image record shared by the renderer, the dataset loader, the detector
and the GAN pipeline, plus the pixel helpers they all need.
"""

from dataclasses import dataclass, field
from typing import Tuple

import numpy as np


@dataclass
class LabeledImage:
    """H x W x 3 pixels in [0, 1] with normalized boxes, class ids and domain tag."""
    pixels: np.ndarray
    boxes: np.ndarray = field(default_factory=lambda: np.zeros((0, 4)))
    classes: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    domain: str = "sim"
    seed: int = 0

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        self.classes = np.asarray(self.classes, dtype=np.int64).reshape(-1)
        if len(self.boxes) != len(self.classes):
            raise ValueError(f"{len(self.boxes)} boxes but {len(self.classes)} classes")

    @property
    def size(self) -> int:
        return int(self.pixels.shape[0])


def to_uint8(pixels: np.ndarray) -> np.ndarray:
    return np.round(np.clip(pixels, 0.0, 1.0) * 255.0).astype(np.uint8)


def horizontal_flip(pixels: np.ndarray, boxes: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Mirror an H x W x 3 image left-right together with its normalized boxes."""
    flipped = pixels[:, ::-1].copy()
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    mirrored = np.stack([boxes[:, 0], 1.0 - boxes[:, 3], boxes[:, 2], 1.0 - boxes[:, 1]], axis=-1)
    return flipped, mirrored
