#!/usr/bin/env python3
"""
Scene Renderer
Draws a sampled Scene in the flat "sim" style or the textured, shaded and
noisy "real" style. Ground-truth boxes come from the object masks only, so
both styles of one scene carry identical labels.
"""

import logging
from typing import Optional, Tuple

import numpy as np
from PIL import Image

from retinagan.core.errors import ConfigError
from retinagan.core.images import LabeledImage

from .photometric import DistortionParams, DistortionStrengths, apply_distortion, sample_distortion
from .scene_generator import Scene, mask_box, object_mask, pixel_grid

logger = logging.getLogger(__name__)

STYLES = ("sim", "real")

SIM_BACKGROUNDS = ((0.82, 0.82, 0.80), (0.70, 0.74, 0.78), (0.78, 0.72, 0.64))
REAL_BACKGROUNDS = ((0.55, 0.50, 0.44), (0.47, 0.50, 0.52), (0.58, 0.52, 0.40))
REAL_STRENGTHS = DistortionStrengths(brightness=0.08, contrast=0.15, saturation=0.15, hue=0.08, noise=0.0)
REAL_NOISE_SIGMA = 0.02
# systematic shift of the real domain on top of the sampled distortion
REAL_CAST = DistortionParams(brightness=-0.04, contrast=0.85, saturation=0.7, hue=0.1)


def _smooth_noise(rng: np.random.Generator, size: int, cells: int) -> np.ndarray:
    """Value noise in [0, 1]: a coarse random grid bilinearly upsampled."""
    coarse = rng.uniform(0.0, 1.0, size=(cells, cells)).astype(np.float32)
    return np.asarray(Image.fromarray(coarse).resize((size, size), Image.Resampling.BILINEAR), dtype=np.float64)


def _texture(rng: np.random.Generator, size: int) -> np.ndarray:
    return 0.6 * _smooth_noise(rng, size, 4) + 0.4 * _smooth_noise(rng, size, 16)


def _shading(rng: np.random.Generator, size: int) -> np.ndarray:
    angle = rng.uniform(0, 2 * np.pi)
    yy, xx = pixel_grid(size)
    ramp = (yy - 0.5) * np.sin(angle) + (xx - 0.5) * np.cos(angle)
    return 1.0 + rng.uniform(0.2, 0.35) * ramp


def _vignette(size: int, strength: float = 0.35) -> np.ndarray:
    yy, xx = pixel_grid(size)
    d2 = (yy - 0.5) ** 2 + (xx - 0.5) ** 2
    return 1.0 - strength * d2 / 0.5


def _compose(scene: Scene, background: Tuple[float, float, float], size: int,
             texture: Optional[np.ndarray] = None) -> Tuple[np.ndarray, list]:
    image = np.empty((size, size, 3))
    image[:] = background
    masks = []
    for obj in scene.objects:
        mask = object_mask(obj, size)
        masks.append(mask)
        image[mask] = obj.color
    if texture is not None:
        image = image * (0.75 + 0.5 * texture[..., None])
    return image, masks


def render(scene: Scene, style: str, seed: Optional[int] = None) -> LabeledImage:
    """
    Render `scene` in `style`.

    Args:
        scene: Sampled layout
        style: "sim" (flat shading, noise-free) or "real"
        seed: Appearance seed for the real style; defaults to the scene seed

    Returns:
        LabeledImage with float32 pixels in [0, 1]
    """
    if style not in STYLES:
        raise ConfigError(f"style must be one of {STYLES}, got {style!r}")
    size = scene.config.image_size
    seed = scene.seed if seed is None else seed

    if style == "sim":
        image, masks = _compose(scene, SIM_BACKGROUNDS[scene.background % len(SIM_BACKGROUNDS)], size)
    else:
        rng = np.random.default_rng([seed, 1])
        image, masks = _compose(scene, REAL_BACKGROUNDS[scene.background % len(REAL_BACKGROUNDS)], size,
                                texture=_texture(rng, size))
        image = image * _shading(rng, size)[..., None]
        image = apply_distortion(np.clip(image, 0.0, 1.0), REAL_CAST)
        image = apply_distortion(image, sample_distortion(int(rng.integers(2 ** 31)), REAL_STRENGTHS))
        image = image + rng.normal(0.0, REAL_NOISE_SIGMA, size=image.shape)
        image = image * _vignette(size)[..., None]

    boxes, classes = [], []
    for obj, mask in zip(scene.objects, masks):
        box = mask_box(mask)
        if box is None:
            continue
        boxes.append(box)
        classes.append(obj.class_id)
    return LabeledImage(pixels=np.clip(image, 0.0, 1.0).astype(np.float32), boxes=np.array(boxes).reshape(-1, 4),
                        classes=np.array(classes, dtype=np.int64), domain=style, seed=scene.seed)
