#!/usr/bin/env python3
"""
Photometric distortions: brightness, contrast, saturation, hue and noise.
"""

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from matplotlib.colors import hsv_to_rgb, rgb_to_hsv

from retinagan.core.errors import ConfigError


@dataclass
class DistortionStrengths:
    """
    Sampling ranges. brightness: additive shift in [-b, b]; contrast and
    saturation: factors in [1-c, 1+c]; hue: rotation in radians in [-h, h];
    noise: Gaussian sigma in [0, n].
    """
    brightness: float = 0.1
    contrast: float = 0.1
    saturation: float = 0.1
    hue: float = 0.05
    noise: float = 0.01

    def __post_init__(self):
        for name in ("brightness", "contrast", "saturation", "noise"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ConfigError(f"{name} strength must lie in [0, 1], got {value}")
        if not 0.0 <= self.hue <= math.pi:
            raise ConfigError(f"hue strength must lie in [0, pi], got {self.hue}")

    @classmethod
    def from_tuple(cls, values: Sequence[float]) -> "DistortionStrengths":
        return cls(*[float(v) for v in values])

    @classmethod
    def zero(cls) -> "DistortionStrengths":
        return cls(0.0, 0.0, 0.0, 0.0, 0.0)


@dataclass
class DistortionParams:
    brightness: float = 0.0
    contrast: float = 1.0
    saturation: float = 1.0
    hue: float = 0.0
    noise_sigma: float = 0.0
    noise_seed: int = 0


def sample_distortion(seed: int, strengths: DistortionStrengths) -> DistortionParams:
    rng = np.random.default_rng(seed)
    return DistortionParams(
        brightness=float(rng.uniform(-strengths.brightness, strengths.brightness)),
        contrast=float(1.0 + rng.uniform(-strengths.contrast, strengths.contrast)),
        saturation=float(1.0 + rng.uniform(-strengths.saturation, strengths.saturation)),
        hue=float(rng.uniform(-strengths.hue, strengths.hue)),
        noise_sigma=float(rng.uniform(0.0, strengths.noise)),
        noise_seed=int(rng.integers(2 ** 31)),
    )


def shift_hue_saturation(image: np.ndarray, hue: float, saturation: float) -> np.ndarray:
    """Rotate hue by `hue` radians and scale saturation, through one HSV round trip."""
    hsv = rgb_to_hsv(np.clip(image, 0.0, 1.0))
    hsv[..., 0] = np.mod(hsv[..., 0] + hue / (2 * math.pi), 1.0)
    hsv[..., 1] = np.clip(hsv[..., 1] * saturation, 0.0, 1.0)
    return hsv_to_rgb(hsv)


def apply_distortion(image: np.ndarray, params: DistortionParams) -> np.ndarray:
    """
    Apply brightness, contrast, saturation/hue and noise in that order, then clip.

    Args:
        image: H x W x 3 array in [0, 1]
        params: Explicit distortion parameters; identity values skip their step

    Returns:
        New array of the same dtype, clipped to [0, 1]
    """
    out = np.asarray(image, dtype=np.float64)
    if params.brightness != 0.0:
        out = out + params.brightness
    if params.contrast != 1.0:
        gray = out.mean()
        out = (out - gray) * params.contrast + gray
    if params.saturation != 1.0 or params.hue != 0.0:
        out = shift_hue_saturation(out, params.hue, params.saturation)
    if params.noise_sigma > 0.0:
        out = out + np.random.default_rng(params.noise_seed).normal(0.0, params.noise_sigma, size=out.shape)
    return np.clip(out, 0.0, 1.0).astype(np.asarray(image).dtype)


def photometric_distort(image: np.ndarray, seed: int, strengths: DistortionStrengths) -> np.ndarray:
    """Sample distortion parameters from `seed` and apply them; labels are untouched."""
    return apply_distortion(image, sample_distortion(seed, strengths))
