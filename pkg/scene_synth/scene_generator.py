#!/usr/bin/env python3
"""
Procedural Scene Generator
Samples labeled layouts of simple shapes; rendering lives in renderer.py.

Coordinates are normalized to the unit square, (y, x) order throughout.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np
from matplotlib.colors import hsv_to_rgb

from retinagan.core.errors import ConfigError, PlacementError

logger = logging.getLogger(__name__)

SHAPES = ("disk", "rectangle", "triangle", "ring")
RING_INNER = 0.55
BACKGROUND_STYLES = 3

# seed offsets keep sim, real and paired corpora disjoint
SEED_OFFSETS = {"sim": 0, "real": 1_000_000, "paired": 2_000_000}


@dataclass
class SceneConfig:
    image_size: int = 64
    num_classes: int = 4
    min_objects: int = 2
    max_objects: int = 6
    min_size: float = 0.15
    max_size: float = 0.35
    stroke_width: float = 0.02
    max_attempts: int = 1000
    min_area_px: int = 9

    def __post_init__(self):
        if self.num_classes < 1:
            raise ConfigError(f"num_classes must be >= 1, got {self.num_classes}")
        if not 1 <= self.min_objects <= self.max_objects:
            raise ConfigError(f"object count range [{self.min_objects}, {self.max_objects}] is invalid")
        if not 0.0 < self.min_size <= self.max_size < 1.0:
            raise ConfigError(f"size range [{self.min_size}, {self.max_size}] is invalid")
        if self.stroke_width < 0:
            raise ConfigError("stroke_width must be >= 0")


@dataclass
class ObjectSpec:
    """One object; `size` is the diameter of its bounding circle."""
    class_id: int
    shape: str
    center: Tuple[float, float]
    size: float
    rotation: float
    aspect: float
    color: Tuple[float, float, float]

    @property
    def radius(self) -> float:
        return self.size / 2.0


@dataclass
class Scene:
    seed: int
    objects: List[ObjectSpec] = field(default_factory=list)
    background: int = 0
    config: SceneConfig = field(default_factory=SceneConfig)


def class_color(class_id: int, num_classes: int, rng: Optional[np.random.Generator] = None) -> Tuple[float, float, float]:
    """Class hue spread around the color wheel, with a small per-object jitter."""
    hue = class_id / num_classes
    sat, val = 0.75, 0.85
    if rng is not None:
        hue += rng.uniform(-0.03, 0.03)
        sat += rng.uniform(-0.1, 0.1)
        val += rng.uniform(-0.1, 0.1)
    rgb = hsv_to_rgb(np.array([hue % 1.0, sat, val]))
    return tuple(float(c) for c in rgb)


def pixel_grid(size: int) -> Tuple[np.ndarray, np.ndarray]:
    centers = (np.arange(size) + 0.5) / size
    return np.meshgrid(centers, centers, indexing="ij")


def object_mask(obj: ObjectSpec, size: int) -> np.ndarray:
    """Boolean [size, size] mask of the object, tested at pixel centers."""
    yy, xx = pixel_grid(size)
    dy = yy - obj.center[0]
    dx = xx - obj.center[1]
    r = obj.radius
    if obj.shape == "disk":
        return dx * dx + dy * dy <= r * r
    if obj.shape == "ring":
        d2 = dx * dx + dy * dy
        return (d2 <= r * r) & (d2 >= (RING_INNER * r) ** 2)
    cos, sin = math.cos(obj.rotation), math.sin(obj.rotation)
    if obj.shape == "rectangle":
        u = cos * dx + sin * dy
        v = -sin * dx + cos * dy
        half_w = r / math.sqrt(1.0 + obj.aspect ** 2)
        half_h = obj.aspect * half_w
        return (np.abs(u) <= half_w) & (np.abs(v) <= half_h)
    if obj.shape == "triangle":
        mask = np.ones_like(dx, dtype=bool)
        for k in range(3):
            angle = obj.rotation + math.pi / 2 + k * 2 * math.pi / 3
            mask &= (math.cos(angle) * dx + math.sin(angle) * dy) <= r / 2
        return mask
    raise ValueError(f"unknown shape '{obj.shape}'")


def mask_box(mask: np.ndarray) -> Optional[Tuple[float, float, float, float]]:
    """Tight normalized (ymin, xmin, ymax, xmax) of a mask, or None when empty."""
    rows = np.nonzero(mask.any(axis=1))[0]
    cols = np.nonzero(mask.any(axis=0))[0]
    if len(rows) == 0:
        return None
    h, w = mask.shape
    return (rows[0] / h, cols[0] / w, (rows[-1] + 1) / h, (cols[-1] + 1) / w)


def _dilated_box(center: Tuple[float, float], radius: float, stroke: float) -> Tuple[float, float, float, float]:
    reach = radius + stroke
    return (center[0] - reach, center[1] - reach, center[0] + reach, center[1] + reach)


def _overlaps(a: Tuple[float, ...], b: Tuple[float, ...]) -> bool:
    return a[0] < b[2] and b[0] < a[2] and a[1] < b[3] and b[1] < a[3]


def sample_scene(seed: int, config: Optional[SceneConfig] = None) -> Scene:
    """
    Sample a scene layout deterministically from `seed`.

    Objects are placed by rejection sampling: dilated bounding-circle boxes
    stay inside the unit square and pairwise disjoint, and every mask covers
    at least `min_area_px` pixels.

    Raises:
        PlacementError: when `max_attempts` candidate placements are exhausted
    """
    config = config or SceneConfig()
    rng = np.random.default_rng(seed)
    count = int(rng.integers(config.min_objects, config.max_objects + 1))
    background = int(rng.integers(BACKGROUND_STYLES))
    placed: List[ObjectSpec] = []
    boxes: List[Tuple[float, ...]] = []
    attempts = 0

    while len(placed) < count:
        if attempts >= config.max_attempts:
            raise PlacementError(f"seed {seed}: placed {len(placed)} of {count} objects "
                                 f"in {config.max_attempts} attempts")
        attempts += 1
        class_id = int(rng.integers(config.num_classes))
        size = float(rng.uniform(config.min_size, config.max_size))
        reach = size / 2 + config.stroke_width
        if reach >= 0.5:
            continue
        center = (float(rng.uniform(reach, 1 - reach)), float(rng.uniform(reach, 1 - reach)))
        obj = ObjectSpec(class_id=class_id, shape=SHAPES[class_id % len(SHAPES)], center=center, size=size,
                         rotation=float(rng.uniform(0, 2 * math.pi)), aspect=float(rng.uniform(0.5, 1.0)),
                         color=class_color(class_id, config.num_classes, rng))
        dilated = _dilated_box(center, obj.radius, config.stroke_width)
        if any(_overlaps(dilated, other) for other in boxes):
            continue
        if object_mask(obj, config.image_size).sum() < config.min_area_px:
            continue
        placed.append(obj)
        boxes.append(dilated)

    logger.debug(f"Scene {seed}: {len(placed)} objects after {attempts} attempts")
    return Scene(seed=seed, objects=placed, background=background, config=config)


def corpus_seeds(kind: str, base: int, count: int) -> List[int]:
    """Seeds for a sim, real or paired corpus; the three ranges never overlap."""
    if kind not in SEED_OFFSETS:
        raise ConfigError(f"corpus kind must be one of {sorted(SEED_OFFSETS)}, got {kind!r}")
    start = base + SEED_OFFSETS[kind]
    return list(range(start, start + count))
