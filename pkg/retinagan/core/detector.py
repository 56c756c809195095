#!/usr/bin/env python3
"""
Micro Detector
One-stage anchor-based detector: strided conv backbone, two-level feature
pyramid, and class/box heads shared across levels.

Trained on a sim/real mixture, then frozen to score the perception
consistency of GAN translations.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence

import numpy as np

from .boxes import (AnchorGrid, DecodedDetections, HeadOutputs, LevelOutputs, MatchTargets, build_anchors,
                    decode_nms, match_anchors)
from .checkpoint import CheckpointData, read_checkpoint, write_checkpoint
from .config import DetectorConfig, config_from_dict, config_to_dict
from .errors import CheckpointError, DatasetError, ShapeError, TrainingError
from .images import horizontal_flip
from .layers import ParameterStore, conv, to_nchw
from .losses import LossParams, focal_loss
from .optim import MomentumState, OptimState, StepSchedule, adam_step, momentum_step
from .tensor_engine import (Tape, Tensor, backward, concat, huber, no_grad, relu, reshape, sigmoid, transpose,
                            tsum, upsample_nearest_2x)

logger = logging.getLogger(__name__)

CHECKPOINT_KIND = "detector"


class Detector:
    """
    Backbone -> FPN (P3 at stride 8, P4 at stride 16) -> shared heads.

    Args:
        config: Architecture and training recipe
        seed: Initialisation seed
        dtype: Parameter dtype (float64 for gradient checks)
    """

    def __init__(self, config: Optional[DetectorConfig] = None, seed: int = 0, dtype: str = "float32"):
        self.config = config or DetectorConfig()
        if len(self.config.strides) != 2 or len(self.config.backbone_channels) != 4:
            raise ShapeError("the micro-detector has four backbone stages and two pyramid levels")
        self.grid: AnchorGrid = build_anchors(self.config.image_size, self.config.strides, self.config.ratios,
                                              self.config.anchor_scale)
        self.params = ParameterStore(prefix="detector.", dtype=dtype)
        self._build(np.random.default_rng(seed))

    def _build(self, rng: np.random.Generator) -> None:
        cfg = self.config
        in_ch = 3
        for i, out_ch in enumerate(cfg.backbone_channels):
            self.params.he_conv(f"backbone{i}", out_ch, in_ch, 3, rng)
            in_ch = out_ch
        self.params.he_conv("lateral3", cfg.fpn_width, cfg.backbone_channels[2], 1, rng)
        self.params.he_conv("lateral4", cfg.fpn_width, cfg.backbone_channels[3], 1, rng)

        anchors = len(cfg.ratios)
        self.params.he_conv("cls_hidden", cfg.head_width, cfg.fpn_width, 3, rng)
        self.params.normal("cls_out.w", (anchors * cfg.num_classes, cfg.head_width, 3, 3), 0.01, rng)
        prior_bias = -math.log((1.0 - cfg.class_prior) / cfg.class_prior)
        self.params.add("cls_out.b", np.full(anchors * cfg.num_classes, prior_bias))
        self.params.he_conv("box_hidden", cfg.head_width, cfg.fpn_width, 3, rng)
        self.params.normal("box_out.w", (anchors * 4, cfg.head_width, 3, 3), 0.01, rng)
        self.params.zeros("box_out.b", (anchors * 4,))

    # Freezing
    @property
    def frozen(self) -> bool:
        return self.params.frozen

    def freeze(self) -> "Detector":
        self.params.freeze()
        return self

    def parameter_hash(self) -> str:
        return self.params.parameter_hash()

    # Forward
    def _head(self, feature: Tensor, prefix: str, per_anchor: int) -> Tensor:
        n, _, h, w = feature.shape
        hidden = relu(conv(self.params, f"{prefix}_hidden", feature, pad=1))
        out = conv(self.params, f"{prefix}_out", hidden, pad=1)
        anchors = len(self.config.ratios)
        out = reshape(out, (n, anchors, per_anchor, h, w))
        out = transpose(out, (0, 3, 4, 1, 2))
        return reshape(out, (n, h * w * anchors, per_anchor))

    def forward(self, images: Tensor) -> HeadOutputs:
        """
        Head outputs for an N x 3 x H x W batch in [0, 1].

        Gradients reach `images` whether or not the detector is frozen.
        """
        size = self.config.image_size
        if images.ndim != 4 or images.shape[1:] != (3, size, size):
            raise ShapeError(f"detector expects N x 3 x {size} x {size} images, got {images.shape}")
        x = images - 0.5
        features = []
        for i in range(len(self.config.backbone_channels)):
            x = relu(conv(self.params, f"backbone{i}", x, stride=2, pad=1))
            features.append(x)
        p4 = conv(self.params, "lateral4", features[3])
        p3 = conv(self.params, "lateral3", features[2]) + upsample_nearest_2x(p4)

        levels = []
        for feature in (p3, p4):
            levels.append(LevelOutputs(cls_logits=self._head(feature, "cls", self.config.num_classes),
                                       box_regression=self._head(feature, "box", 4)))
        return HeadOutputs(levels)

    def predict(self, pixels: np.ndarray) -> List[DecodedDetections]:
        """Decoded detections for H x W x 3 images (single image or batch)."""
        with no_grad():
            outputs = self.forward(Tensor(to_nchw(pixels), dtype=self.params.dtype))
        return decode_nms(outputs, self.grid, self.config.score_thresh, self.config.nms_iou, self.config.max_det)

    # Persistence
    def to_checkpoint(self, step: int = 0) -> CheckpointData:
        arrays = {f"params/{k}": v.astype(np.float32) for k, v in self.params.state_arrays().items()}
        return CheckpointData(kind=CHECKPOINT_KIND, step=step, config=config_to_dict(self.config),
                              scalars={"frozen": self.frozen}, arrays=arrays)

    @classmethod
    def from_checkpoint(cls, data: CheckpointData) -> "Detector":
        if data.kind != CHECKPOINT_KIND:
            raise CheckpointError(f"expected a detector checkpoint, found kind '{data.kind}'")
        detector = cls(config_from_dict(DetectorConfig, data.config))
        detector.params.load_arrays({k.split("/", 1)[1]: v for k, v in data.arrays.items()
                                     if k.startswith("params/")})
        if data.scalars.get("frozen"):
            detector.freeze()
        return detector


def save_detector(detector: Detector, path: str, step: int = 0) -> str:
    return write_checkpoint(path, detector.to_checkpoint(step))


def load_detector(path: str, freeze: bool = True) -> Detector:
    detector = Detector.from_checkpoint(read_checkpoint(path))
    if freeze and not detector.frozen:
        detector.freeze()
    return detector


def detect_image(detector: Detector, pixels: np.ndarray) -> DecodedDetections:
    return detector.predict(pixels)[0]


def concat_levels(outputs: HeadOutputs):
    cls = concat([lv.cls_logits for lv in outputs.levels], axis=1)
    box = concat([lv.box_regression for lv in outputs.levels], axis=1)
    return cls, box


def detector_training_loss(outputs: HeadOutputs, targets: Sequence[MatchTargets],
                           params: Optional[LossParams] = None) -> Tensor:
    """
    Focal class loss over non-ignored anchors plus Huber box loss over
    positives, both divided by the positive count (floored at 1).
    """
    params = params or LossParams()
    cls, box = concat_levels(outputs)
    if len(targets) != cls.shape[0]:
        raise ShapeError(f"{len(targets)} target sets for a batch of {cls.shape[0]}")
    class_targets = np.stack([t.class_targets for t in targets]).astype(cls.dtype)
    box_targets = np.stack([t.box_targets for t in targets]).astype(box.dtype)
    valid = np.stack([~t.ignored for t in targets]).astype(cls.dtype)[..., None]
    positive = np.stack([t.positive for t in targets]).astype(box.dtype)
    normalizer = max(float(positive.sum()), 1.0)

    class_loss = tsum(focal_loss(class_targets, sigmoid(cls), params.gamma, params.alpha) * valid)
    box_loss = tsum(tsum(huber(box - box_targets, params.delta), axis=-1) * positive)
    return (class_loss + box_loss) / normalizer


@dataclass
class DetectorTrainResult:
    detector: Detector
    losses: List[float] = field(default_factory=list)


def _split_domains(images: Sequence) -> Dict[str, list]:
    pools: Dict[str, list] = {"sim": [], "real": []}
    for image in images:
        pools.setdefault(image.domain, []).append(image)
    return pools


def _sample_batch(pools: Dict[str, list], batch_size: int, mix_ratio: float, rng: np.random.Generator) -> list:
    sim, real = pools.get("sim", []), pools.get("real", [])
    if not sim or not real:
        pool = sim or real or [img for group in pools.values() for img in group]
        return [pool[i] for i in rng.integers(len(pool), size=batch_size)]
    n_sim = int(round(batch_size * mix_ratio))
    batch = [sim[i] for i in rng.integers(len(sim), size=n_sim)]
    batch += [real[i] for i in rng.integers(len(real), size=batch_size - n_sim)]
    return batch


def train_detector(config: DetectorConfig, images: Sequence, steps: Optional[int] = None,
                   seed: Optional[int] = None,
                   progress: Optional[Callable[[Iterable], Iterable]] = None) -> DetectorTrainResult:
    """
    Train a fresh detector on a sim/real mixture.

    Args:
        config: Architecture and recipe (mix_ratio, flip, optimizer, lr...)
        images: LabeledImages from either domain; the `domain` tag selects the pool
        steps: Overrides config.steps
        seed: Overrides config.seed (initialisation and batch sampling)
        progress: Optional iterable wrapper such as tqdm

    Returns:
        DetectorTrainResult with the trained (unfrozen) detector and per-step losses
    """
    steps = config.steps if steps is None else steps
    seed = config.seed if seed is None else seed
    if not images:
        raise DatasetError("detector training needs at least one image")
    pools = _split_domains(images)
    detector = Detector(config, seed=seed)
    params = {name: t for name, t in detector.params}
    loss_params = config.loss_params()

    if config.optimizer == "adam":
        state = OptimState(lr=config.lr, beta1=0.9, beta2=0.999, weight_decay=config.weight_decay)
    else:
        boundaries = tuple(int(f * steps) for f in config.lr_boundaries)
        state = MomentumState(schedule=StepSchedule(config.lr, boundaries), momentum=config.momentum,
                              weight_decay=config.weight_decay)

    logger.info(f"Training detector for {steps} steps on {len(pools.get('sim', []))} sim / "
                f"{len(pools.get('real', []))} real images")
    losses: List[float] = []
    iterator = range(steps) if progress is None else progress(range(steps))
    for step in iterator:
        detector.params.check_trainable()
        rng = np.random.default_rng([seed, step])
        batch = _sample_batch(pools, config.batch_size, config.mix_ratio, rng)
        pixels, targets = [], []
        for image in batch:
            px, boxes = image.pixels, image.boxes
            if config.flip and rng.random() < 0.5:
                px, boxes = horizontal_flip(px, boxes)
            pixels.append(px)
            targets.append(match_anchors(detector.grid, boxes, image.classes, config.num_classes))

        with Tape():
            outputs = detector.forward(Tensor(to_nchw(pixels)))
            loss = detector_training_loss(outputs, targets, loss_params)
        value = loss.item()
        if not np.isfinite(value):
            raise TrainingError("detector loss is not finite", step=step, term="detector")
        grads = backward(loss, list(params.values()))
        named = {name: grads[t.id] for name, t in params.items()}
        if config.optimizer == "adam":
            adam_step(params, named, state)
        else:
            momentum_step(params, named, state)
        losses.append(value)
        if config.log_every and (step + 1) % config.log_every == 0:
            logger.info(f"detector step {step + 1}/{steps} loss {value:.4f}")

    return DetectorTrainResult(detector=detector, losses=losses)
