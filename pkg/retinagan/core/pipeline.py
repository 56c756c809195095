#!/usr/bin/env python3
"""
RetinaGAN Training Pipeline
Minibatch sampling and preprocessing, the alternating discriminator /
generator loop against a frozen detector, checkpointing and resume,
ensemble training and dataset translation.
"""

import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from PIL import Image

from scene_synth.dataset_io import load_dataset, read_manifest, record_to_image, manifest_path_for, write_images
from scene_synth.photometric import DistortionStrengths, photometric_distort

from .checkpoint import CheckpointData, read_checkpoint, write_checkpoint
from .config import TrainConfig, config_from_dict, config_to_dict
from .detector import CHECKPOINT_KIND as DETECTOR_KIND
from .detector import Detector, load_detector, save_detector
from .errors import (CheckpointError, DatasetError, GradientError, NonFiniteError, ShapeError, TrainingError)
from .gan_nets import (GanBundle, LossReport, discriminator_objective, generator_objective, translate)
from .images import LabeledImage
from .layers import to_nchw, to_nhwc
from .losses import LossParams
from .metrics import psnr
from .optim import OptimState, adam_step
from .tensor_engine import Tape, Tensor, backward, no_grad

logger = logging.getLogger(__name__)

BUNDLE_KIND = "gan_bundle"
LOSS_LOG = "loss_log.jsonl"
FINAL_CHECKPOINT = "final.rgan"
DOMAINS = {"sim": 0, "real": 1}
DIRECTIONS = {"sim2real": ("sim", "real"), "real2sim": ("real", "sim")}

ImageSource = Union[str, Sequence[LabeledImage]]
DetectorSource = Union[str, Detector, None]


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def bundle_to_checkpoint(bundle: GanBundle, config: Optional[TrainConfig] = None) -> CheckpointData:
    arrays = {}
    for net in (bundle.G, bundle.F, bundle.D_x, bundle.D_y):
        for name, tensor in net.params:
            arrays[f"{net.name}/params/{name}"] = tensor.data.astype(np.float32)
    for disc in (bundle.D_x, bundle.D_y):
        for key, value in disc.spectral_arrays().items():
            arrays[f"{disc.name}/spectral/{key}"] = value
    for label, state in (("opt_g", bundle.opt_g), ("opt_d", bundle.opt_d)):
        for key, value in state.arrays().items():
            arrays[f"{label}/{key}"] = value.astype(np.float32)

    scalars = {
        "opt_g": bundle.opt_g.scalars(),
        "opt_d": bundle.opt_d.scalars(),
        "spectral_iterations": {disc.name: {k: s.iterations for k, s in disc.spectral.items()}
                                for disc in (bundle.D_x, bundle.D_y)},
    }
    snapshot = config_to_dict(config) if config is not None else bundle.config
    return CheckpointData(kind=BUNDLE_KIND, step=bundle.step, config=snapshot, scalars=scalars, arrays=arrays)


def _group(arrays: Dict[str, np.ndarray], prefix: str) -> Dict[str, np.ndarray]:
    return {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}


def bundle_from_checkpoint(data: CheckpointData) -> GanBundle:
    if data.kind != BUNDLE_KIND:
        raise CheckpointError(f"expected a GAN checkpoint, found kind '{data.kind}'")
    config = config_from_dict(TrainConfig, data.config)
    bundle = create_bundle(config)
    for net in (bundle.G, bundle.F, bundle.D_x, bundle.D_y):
        net.params.load_arrays(_group(data.arrays, f"{net.name}/params/"))
    iterations = data.scalars.get("spectral_iterations", {})
    for disc in (bundle.D_x, bundle.D_y):
        disc.load_spectral(_group(data.arrays, f"{disc.name}/spectral/"), iterations.get(disc.name, {}))
    bundle.opt_g = OptimState.restore(data.scalars["opt_g"], _group(data.arrays, "opt_g/"))
    bundle.opt_d = OptimState.restore(data.scalars["opt_d"], _group(data.arrays, "opt_d/"))
    bundle.step = data.step
    bundle.config = dict(data.config)
    return bundle


def save_bundle(bundle: GanBundle, path: str, config: Optional[TrainConfig] = None) -> str:
    return write_checkpoint(path, bundle_to_checkpoint(bundle, config))


def load_bundle(path: str) -> GanBundle:
    return bundle_from_checkpoint(read_checkpoint(path))


def checkpoint_save(obj: Union[GanBundle, Detector], path: str, config: Optional[TrainConfig] = None) -> str:
    """Save a GAN bundle or a detector in the shared checkpoint format."""
    if isinstance(obj, Detector):
        return save_detector(obj, path)
    if isinstance(obj, GanBundle):
        return save_bundle(obj, path, config)
    raise CheckpointError(f"cannot checkpoint objects of type {type(obj).__name__}")


def checkpoint_load(path: str) -> Union[GanBundle, Detector]:
    """Load whichever object the checkpoint holds; detectors come back frozen."""
    data = read_checkpoint(path)
    if data.kind == DETECTOR_KIND:
        detector = Detector.from_checkpoint(data)
        return detector if detector.frozen else detector.freeze()
    return bundle_from_checkpoint(data)


def create_bundle(config: TrainConfig, seed: Optional[int] = None) -> GanBundle:
    bundle = GanBundle.create(image_size=config.image_size, generator_base=config.generator_base,
                              discriminator_base=config.discriminator_base,
                              seed=config.seed if seed is None else seed, lr=config.lr, beta1=config.beta1,
                              beta2=config.beta2, eps=config.adam_eps, weight_decay=config.weight_decay,
                              spectral_iters=config.spectral_iters)
    bundle.config = config_to_dict(config)
    return bundle


# ---------------------------------------------------------------------------
# Data
# ---------------------------------------------------------------------------

def resolve_images(source: ImageSource, limit: int = 0, what: str = "dataset") -> List[LabeledImage]:
    images = load_dataset(source, limit=limit) if isinstance(source, str) else list(source)
    if limit > 0:
        images = images[:limit]
    if not images:
        raise DatasetError(f"{what} is empty", path=source if isinstance(source, str) else None)
    return images


def resolve_detector(source: DetectorSource) -> Optional[Detector]:
    if source is None:
        return None
    detector = load_detector(source) if isinstance(source, str) else source
    if not detector.frozen:
        detector.freeze()
    return detector


def crop_and_resize(pixels: np.ndarray, top: int, left: int, crop: int, size: int) -> np.ndarray:
    """Crop a crop x crop window and bilinearly resize it back to size x size."""
    window = pixels[top:top + crop, left:left + crop]
    if crop == size:
        return np.array(window, dtype=np.float32)
    channels = [np.asarray(Image.fromarray(np.ascontiguousarray(window[..., c], dtype=np.float32))
                           .resize((size, size), Image.Resampling.BILINEAR)) for c in range(3)]
    return np.clip(np.stack(channels, axis=-1), 0.0, 1.0).astype(np.float32)


def sample_minibatch(images: Sequence[LabeledImage], config: TrainConfig, step: int, domain: str) -> np.ndarray:
    """
    Sample with replacement and preprocess one domain's minibatch.

    Everything random derives from (seed, step, domain), so the batch does
    not depend on what was sampled before.
    """
    rng = np.random.default_rng([config.seed, step, DOMAINS[domain]])
    strengths = DistortionStrengths.from_tuple(config.distortion_strengths)
    batch = []
    for index in rng.integers(len(images), size=config.batch_size):
        pixels = images[int(index)].pixels
        if pixels.shape[:2] != (config.image_size, config.image_size):
            raise DatasetError(f"image of shape {pixels.shape} does not match image_size {config.image_size}",
                               record_index=int(index))
        top, left = (int(v) for v in rng.integers(0, config.image_size - config.crop_size + 1, size=2))
        view = crop_and_resize(pixels, top, left, config.crop_size, config.image_size)
        batch.append(photometric_distort(view, int(rng.integers(2 ** 31)), strengths))
    return np.stack(batch).astype(np.float32)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def _check_finite(report: LossReport) -> None:
    for name, value in report.to_dict().items():
        if name != "step" and not np.isfinite(value):
            raise TrainingError("loss is not finite", step=report.step, term=name)


def train_step(bundle: GanBundle, x_batch: np.ndarray, y_batch: np.ndarray, detector: Optional[Detector],
               params: LossParams) -> LossReport:
    """
    One alternating update on a shared batch: discriminators first, then the
    generators against the updated discriminators.

    Args:
        bundle: Networks and optimizer states, updated in place
        x_batch, y_batch: N x H x W x 3 sim and real minibatches
        detector: Frozen detector or None for plain CycleGAN
        params: Loss weights

    Returns:
        LossReport for this step
    """
    step = bundle.step
    x = Tensor(to_nchw(x_batch))
    y = Tensor(to_nchw(y_batch))
    d_params = bundle.discriminator_params()
    g_params = bundle.generator_params()

    stage = "translation"
    try:
        with Tape():
            bundle.D_x.power_iterate()
            bundle.D_y.power_iterate()
            t = translate(bundle, x, y)
            stage = "total_D"
            d_obj = discriminator_objective(bundle, t)
            d_grads = backward(d_obj.total, list(d_params.values()))
            adam_step(d_params, {n: d_grads[p.id] for n, p in d_params.items()}, bundle.opt_d)

            stage = "total_G"
            g_obj = generator_objective(bundle, t, detector, params)
            g_grads = backward(g_obj.total, list(g_params.values()))
            adam_step(g_params, {n: g_grads[p.id] for n, p in g_params.items()}, bundle.opt_g)
    except (NonFiniteError, GradientError) as e:
        raise TrainingError(str(e), step=step, term=stage) from e

    report = LossReport(step=step, **g_obj.parts, **d_obj.parts)
    _check_finite(report)
    bundle.step += 1
    return report


def _read_log(path: str) -> List[Dict]:
    if not os.path.exists(path):
        return []
    with open(path, "r", encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]


def read_loss_log(path: str) -> List[LossReport]:
    log_path = os.path.join(path, LOSS_LOG) if os.path.isdir(path) else path
    return [LossReport.from_dict(r) for r in _read_log(log_path)]


def _prepare_log(out_dir: str, resume_step: int) -> str:
    log_path = os.path.join(out_dir, LOSS_LOG)
    kept = [r for r in _read_log(log_path) if r["step"] < resume_step] if resume_step else []
    with open(log_path, "w", encoding="utf-8") as f:
        for record in kept:
            f.write(json.dumps(record) + "\n")
    return log_path


@dataclass
class TrainResult:
    bundle: GanBundle
    reports: List[LossReport] = field(default_factory=list)
    checkpoints: List[str] = field(default_factory=list)
    detector_hash: Optional[str] = None


def train_retinagan(config: TrainConfig, sim: ImageSource, real: ImageSource, detector: DetectorSource,
                    out_dir: Optional[str] = None, resume_from: Optional[str] = None,
                    progress: Optional[Callable[[Iterable], Iterable]] = None) -> TrainResult:
    """
    Train G, F, D_x, D_y for `config.steps` total steps.

    Args:
        config: Training configuration; `seed` fixes every random choice
        sim, real: Dataset directories or preloaded LabeledImages
        detector: Detector checkpoint path or Detector (frozen here); None trains plain CycleGAN
        out_dir: Receives ckpt_XXXXXX.rgan, final.rgan and loss_log.jsonl when given
        resume_from: Checkpoint to continue from; the loss log is cut back to its step
        progress: Optional iterable wrapper such as tqdm

    Returns:
        TrainResult with the bundle, this call's LossReports and written checkpoints
    """
    sim_images = resolve_images(sim, what="sim dataset")
    real_images = resolve_images(real, limit=config.max_real_images, what="real dataset")
    frozen = resolve_detector(detector)
    detector_hash = frozen.parameter_hash() if frozen is not None else None
    params = config.loss_params()

    if resume_from:
        bundle = load_bundle(resume_from)
        logger.info(f"Resuming from {resume_from} at step {bundle.step}")
        saved = config_from_dict(TrainConfig, bundle.config)
        if config_to_dict(saved) != config_to_dict(config):
            logger.warning("Resume config differs from the checkpoint's; trajectories may diverge")
        bundle.config = config_to_dict(config)
    else:
        bundle = create_bundle(config)

    log_file = None
    written: List[str] = []
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        log_file = open(_prepare_log(out_dir, bundle.step if resume_from else 0), "a", encoding="utf-8")

    logger.info(f"Training RetinaGAN: steps {bundle.step}->{config.steps}, lambda_prcp {config.lambda_prcp}, "
                f"{len(sim_images)} sim / {len(real_images)} real images")
    reports: List[LossReport] = []
    steps = range(bundle.step, config.steps)
    iterator = progress(steps) if progress is not None else steps
    try:
        for step in iterator:
            x_batch = sample_minibatch(sim_images, config, step, "sim")
            y_batch = sample_minibatch(real_images, config, step, "real")
            report = train_step(bundle, x_batch, y_batch, frozen, params)
            reports.append(report)
            if frozen is not None and frozen.parameter_hash() != detector_hash:
                raise TrainingError("detector parameters changed during GAN training", step=step, term="detector")
            if log_file is not None:
                log_file.write(json.dumps(report.to_dict()) + "\n")
                log_file.flush()
            if config.log_every and bundle.step % config.log_every == 0:
                logger.info(f"step {bundle.step}: G {report.total_G:.4f} D {report.total_D:.4f} "
                            f"cycle {report.cycle:.4f} prcp {report.prcp:.4f}")
            if out_dir and bundle.step % config.checkpoint_every == 0:
                written.append(save_bundle(bundle, os.path.join(out_dir, f"ckpt_{bundle.step:06d}.rgan"), config))
    finally:
        if log_file is not None:
            log_file.close()

    if out_dir:
        written.append(save_bundle(bundle, os.path.join(out_dir, FINAL_CHECKPOINT), config))
        logger.info(f"Saved final checkpoint to {written[-1]}")
    return TrainResult(bundle=bundle, reports=reports, checkpoints=written, detector_hash=detector_hash)


# ---------------------------------------------------------------------------
# Ensemble
# ---------------------------------------------------------------------------

def member_config(config: TrainConfig, index: int) -> TrainConfig:
    """
    Member i trains with seed + i. Member 0 keeps the configured lambda_prcp,
    so a one-member ensemble is a plain run; later members take the i-th
    weight of the cycling schedule.
    """
    schedule = config.ensemble_lambda_schedule
    weight = config.lambda_prcp if index == 0 else schedule[index % len(schedule)]
    return TrainConfig(**{**config_to_dict(config), "seed": config.seed + index,
                          "lambda_prcp": weight,
                          "distortion_strengths": tuple(config.distortion_strengths),
                          "ensemble_lambda_schedule": tuple(schedule)})


def _train_member(args) -> str:
    config, sim, real, detector, member_dir = args
    result = train_retinagan(config, sim, real, detector, out_dir=member_dir)
    return result.checkpoints[-1]


def train_ensemble(config: TrainConfig, sim: ImageSource, real: ImageSource, detector: DetectorSource,
                   out_dir: str, n_seeds: int = 3, workers: int = 1) -> List[str]:
    """
    Train `n_seeds` independent members; returns their final checkpoint paths.

    Members live in `<out_dir>/member_<i>` and may run in a process pool.
    """
    if n_seeds < 1:
        raise TrainingError(f"ensemble needs at least one member, got {n_seeds}")
    if n_seeds == 1:
        logger.warning("Ensemble of one member is a single RetinaGAN run")
    jobs = [(member_config(config, i), sim, real, detector, os.path.join(out_dir, f"member_{i}"))
            for i in range(n_seeds)]
    for i, job in enumerate(jobs):
        logger.info(f"Ensemble member {i}: seed {job[0].seed}, lambda_prcp {job[0].lambda_prcp}")
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_train_member, jobs))
    return [_train_member(job) for job in jobs]


# ---------------------------------------------------------------------------
# Translation
# ---------------------------------------------------------------------------

def translate_pixels(generator, pixels: np.ndarray, batch_size: int = 16) -> np.ndarray:
    """Run a generator over N x H x W x 3 pixels without recording gradients."""
    outputs = []
    with no_grad():
        for start in range(0, len(pixels), batch_size):
            chunk = Tensor(to_nchw(np.asarray(pixels[start:start + batch_size], dtype=np.float32)))
            outputs.append(to_nhwc(generator(chunk).data))
    return np.concatenate(outputs).astype(np.float32) if outputs else np.zeros((0,) + tuple(pixels.shape[1:]))


def _resolve_members(members) -> List[Tuple[str, GanBundle]]:
    if isinstance(members, (str, GanBundle)):
        members = [members]
    resolved = []
    for k, member in enumerate(members):
        if isinstance(member, str):
            resolved.append((member, load_bundle(member)))
        else:
            resolved.append((f"member_{k}", member))
    return resolved


def translate_dataset(members, data: str, out_dir: str, direction: str = "sim2real") -> str:
    """
    Translate every record of a dataset with each member's generator.

    Labels are copied unchanged; each output record carries a `provenance`
    entry naming its source image, member and direction.

    Returns:
        Path of the new manifest (input count x member count records)
    """
    if direction not in DIRECTIONS:
        raise ShapeError(f"direction must be one of {sorted(DIRECTIONS)}, got {direction!r}")
    source_domain, target_domain = DIRECTIONS[direction]
    manifest = manifest_path_for(data)
    base_dir = os.path.dirname(os.path.abspath(manifest))
    records = read_manifest(manifest)
    if not records:
        raise DatasetError("nothing to translate", path=manifest)
    images = [record_to_image(r, base_dir, i, manifest) for i, r in enumerate(records)]
    pixels = np.stack([img.pixels for img in images])

    outputs = []
    for k, (label, bundle) in enumerate(_resolve_members(members)):
        generator = bundle.G if direction == "sim2real" else bundle.F
        if pixels.shape[1:3] != (generator.image_size, generator.image_size):
            raise ShapeError(f"dataset images are {pixels.shape[1:3]}, generator expects {generator.image_size}")
        translated = translate_pixels(generator, pixels)
        scores = [psnr(a, b) for a, b in zip(pixels, translated)]
        logger.info(f"Member {k} ({label}): mean PSNR {np.mean(scores):.2f} dB over {len(scores)} images")
        for record, image, out in zip(records, images, translated):
            stem = os.path.splitext(os.path.basename(record["image"]))[0]
            result = LabeledImage(pixels=out, boxes=image.boxes, classes=image.classes, domain=target_domain,
                                  seed=image.seed)
            provenance = {"source": record["image"], "source_domain": record["domain"], "member": k,
                          "checkpoint": label, "direction": direction}
            outputs.append((f"{stem}_to_{target_domain}_m{k}", result, {"provenance": provenance}))
    logger.info(f"Translating {len(records)} {source_domain} records with {len(outputs) // len(records)} member(s)")
    return write_images(outputs, out_dir)
