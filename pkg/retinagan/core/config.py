#!/usr/bin/env python3
"""
Training configuration records and the flat `key = value` config format.
"""

import dataclasses
import logging
import os
from dataclasses import dataclass
from typing import Any, Dict, Optional, Tuple, Type, TypeVar

from .errors import ConfigError
from .losses import LossParams

logger = logging.getLogger(__name__)

T = TypeVar("T")


@dataclass
class TrainConfig:
    """Every knob of a GAN training run; the config file lists exactly these keys."""
    steps: int = 5000
    batch_size: int = 8
    lr: float = 1e-4
    beta1: float = 0.1
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 7e-5
    lambda_gan: float = 1.0
    lambda_cycle: float = 10.0
    lambda_prcp: float = 0.1
    gamma: float = 2.0
    alpha: float = 0.25
    delta: float = 1.0
    seed: int = 0
    image_size: int = 64
    crop_size: int = 56
    # brightness, contrast, saturation, hue, noise
    distortion_strengths: Tuple[float, ...] = (0.1, 0.1, 0.1, 0.05, 0.01)
    checkpoint_every: int = 1000
    log_every: int = 50
    generator_base: int = 16
    discriminator_base: int = 16
    spectral_iters: int = 1
    max_real_images: int = 0
    ensemble_lambda_schedule: Tuple[float, ...] = (0.1, 0.3, 1.0)

    def __post_init__(self):
        validate(self)

    def loss_params(self) -> LossParams:
        return LossParams(gamma=self.gamma, alpha=self.alpha, delta=self.delta,
                          lambda_prcp=self.lambda_prcp, lambda_cycle=self.lambda_cycle,
                          lambda_gan=self.lambda_gan)


@dataclass
class DetectorConfig:
    """Micro-detector architecture and its training recipe."""
    image_size: int = 64
    num_classes: int = 4
    backbone_channels: Tuple[int, ...] = (16, 32, 64, 64)
    fpn_width: int = 32
    head_width: int = 32
    strides: Tuple[int, ...] = (8, 16)
    ratios: Tuple[float, ...] = (0.5, 1.0, 2.0)
    anchor_scale: float = 2.0
    class_prior: float = 0.01
    steps: int = 5000
    batch_size: int = 16
    optimizer: str = "adam"
    lr: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 1e-5
    lr_boundaries: Tuple[float, ...] = (0.67, 0.89)
    mix_ratio: float = 0.5
    flip: bool = True
    gamma: float = 2.0
    alpha: float = 0.25
    delta: float = 1.0
    seed: int = 0
    log_every: int = 100
    score_thresh: float = 0.05
    nms_iou: float = 0.5
    max_det: int = 20

    def __post_init__(self):
        validate(self)

    def loss_params(self) -> LossParams:
        return LossParams(gamma=self.gamma, alpha=self.alpha, delta=self.delta)


_NON_NEGATIVE = ("steps", "lr", "weight_decay", "lambda_gan", "lambda_cycle", "lambda_prcp", "gamma",
                 "max_real_images", "momentum", "adam_eps")
_POSITIVE = ("batch_size", "image_size", "crop_size", "checkpoint_every", "log_every", "generator_base",
             "discriminator_base", "num_classes", "fpn_width", "head_width", "delta", "anchor_scale")


def validate(cfg: Any) -> None:
    for name in _NON_NEGATIVE:
        if hasattr(cfg, name) and getattr(cfg, name) < 0:
            raise ConfigError(f"{name} must be >= 0, got {getattr(cfg, name)}")
    for name in _POSITIVE:
        if hasattr(cfg, name) and getattr(cfg, name) <= 0:
            raise ConfigError(f"{name} must be > 0, got {getattr(cfg, name)}")
    for name in ("alpha", "mix_ratio", "class_prior"):
        if hasattr(cfg, name) and not 0.0 <= getattr(cfg, name) <= 1.0:
            raise ConfigError(f"{name} must lie in [0, 1], got {getattr(cfg, name)}")
    for name in ("beta1", "beta2"):
        if hasattr(cfg, name) and not 0.0 <= getattr(cfg, name) < 1.0:
            raise ConfigError(f"{name} must lie in [0, 1), got {getattr(cfg, name)}")
    if hasattr(cfg, "crop_size") and cfg.crop_size > cfg.image_size:
        raise ConfigError(f"crop_size {cfg.crop_size} exceeds image_size {cfg.image_size}")
    if hasattr(cfg, "distortion_strengths"):
        if len(cfg.distortion_strengths) != 5 or min(cfg.distortion_strengths) < 0:
            raise ConfigError("distortion_strengths needs five non-negative values "
                              "(brightness, contrast, saturation, hue, noise)")
    if hasattr(cfg, "ensemble_lambda_schedule"):
        if not cfg.ensemble_lambda_schedule or min(cfg.ensemble_lambda_schedule) < 0:
            raise ConfigError("ensemble_lambda_schedule needs at least one non-negative weight")
    if getattr(cfg, "optimizer", "adam") not in ("adam", "momentum"):
        raise ConfigError(f"optimizer must be 'adam' or 'momentum', got {cfg.optimizer!r}")


def _format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(_format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_value(raw: str, default: Any, key: str) -> Any:
    try:
        if isinstance(default, bool):
            lowered = raw.strip().lower()
            if lowered not in ("true", "false"):
                raise ValueError(raw)
            return lowered == "true"
        if isinstance(default, tuple):
            item_type = type(default[0]) if default else float
            parts = [p.strip() for p in raw.split(",") if p.strip()]
            return tuple(item_type(p) for p in parts)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw.strip()
    except ValueError:
        raise ConfigError(f"invalid value for '{key}': {raw!r}") from None


def config_to_dict(cfg: Any) -> Dict[str, Any]:
    return {f.name: (list(v) if isinstance(v, tuple) else v)
            for f in dataclasses.fields(cfg) for v in [getattr(cfg, f.name)]}


def config_from_dict(cls: Type[T], data: Dict[str, Any]) -> T:
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {', '.join(unknown)}")
    values = {k: (tuple(v) if isinstance(v, list) else v) for k, v in data.items()}
    return cls(**values)


def config_to_text(cfg: Any) -> str:
    lines = [f"# {type(cfg).__name__}"]
    for f in dataclasses.fields(cfg):
        lines.append(f"{f.name} = {_format_value(getattr(cfg, f.name))}")
    return "\n".join(lines) + "\n"


def parse_config_text(cls: Type[T], text: str) -> T:
    """Parse `key = value` lines; blank lines and `#` comments are skipped."""
    defaults = cls()
    known = {f.name for f in dataclasses.fields(cls)}
    values: Dict[str, Any] = {}
    for number, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {number}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in stripped.split("=", 1))
        if key not in known:
            raise ConfigError(f"line {number}: unknown key '{key}'")
        values[key] = _parse_value(raw, getattr(defaults, key), key)
    return cls(**values)


def write_config(cfg: Any, path: str) -> str:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        f.write(config_to_text(cfg))
    return path


def read_config(cls: Type[T], path: str) -> T:
    try:
        with open(path, "r", encoding="utf-8") as f:
            text = f.read()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    logger.info(f"Loaded {cls.__name__} from {path}")
    return parse_config_text(cls, text)


def override(cfg: T, **changes: Optional[Any]) -> T:
    """Copy of cfg with every non-None change applied (CLI flags over file values)."""
    applied = {k: v for k, v in changes.items() if v is not None}
    return dataclasses.replace(cfg, **applied) if applied else cfg
