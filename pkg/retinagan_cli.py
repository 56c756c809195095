#!/usr/bin/env python3
"""
RetinaGAN Command Line
Generate synthetic corpora, train the detector and the GANs, translate
datasets and evaluate translation quality.
"""

import argparse
import json
import logging
import os
import sys
from typing import List, Optional

from tqdm import tqdm

sys.path.append(os.path.dirname(os.path.abspath(__file__)))

from retinagan.core.config import DetectorConfig, TrainConfig, override, read_config, write_config
from retinagan.core.errors import RetinaGANError
from retinagan.core.logging_setup import setup_logging

logger = logging.getLogger("retinagan")

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_INVALID_SCORE = 2


def progress_bar(desc: str):
    return lambda iterable: tqdm(iterable, desc=desc, unit="step")


def load_train_config(args) -> TrainConfig:
    base = read_config(TrainConfig, args.config) if args.config else TrainConfig()
    return override(base, steps=args.steps, seed=args.seed, lambda_prcp=args.lambda_prcp,
                    lambda_cycle=args.lambda_cycle, batch_size=args.batch_size,
                    max_real_images=args.max_real_images)


def cmd_gen_data(args) -> int:
    from scene_synth.dataset_io import generate_corpus
    from scene_synth.scene_generator import SceneConfig

    print(f"🎨 Generating {args.num} {args.style} scenes (seed {args.seed})...")
    config = SceneConfig(image_size=args.size, num_classes=args.num_classes)
    manifest = generate_corpus(args.out, args.num, args.seed, args.style, config, progress=progress_bar("scenes"))
    print(f"✅ Dataset written: {manifest}")
    return EXIT_OK


def cmd_train_detector(args) -> int:
    from retinagan.core.detector import save_detector, train_detector
    from scene_synth.dataset_io import load_dataset

    config = read_config(DetectorConfig, args.config) if args.config else DetectorConfig()
    config = override(config, steps=args.steps, seed=args.seed, mix_ratio=args.mix_ratio)
    images = [img for path in args.data.split(",") if path for img in load_dataset(path)]
    print(f"🔧 Training detector on {len(images)} images for {config.steps} steps...")
    result = train_detector(config, images, progress=progress_bar("detector"))
    path = save_detector(result.detector.freeze(), args.out, step=config.steps)
    write_config(config, os.path.splitext(args.out)[0] + ".cfg")
    print(f"✅ Detector saved: {path} (final loss {result.losses[-1] if result.losses else float('nan'):.4f})")
    return EXIT_OK


def cmd_detect(args) -> int:
    from retinagan.core.detector import detect_image, load_detector
    from scene_synth.dataset_io import load_png

    detector = load_detector(args.ckpt)
    detections = detect_image(detector, load_png(args.image))
    payload = json.dumps(detections.to_dict(), indent=2, ensure_ascii=False)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            f.write(payload)
        print(f"✅ {len(detections)} detections written to {args.out}")
    else:
        print(payload)
    return EXIT_OK


def cmd_train_gan(args) -> int:
    from retinagan.core.pipeline import train_retinagan

    config = load_train_config(args)
    os.makedirs(args.out, exist_ok=True)
    write_config(config, os.path.join(args.out, "train.cfg"))
    detector = None if args.no_detector else args.detector
    mode = "CycleGAN baseline" if detector is None else f"RetinaGAN (lambda_prcp {config.lambda_prcp})"
    print(f"🚀 Training {mode} for {config.steps} steps...")
    result = train_retinagan(config, args.sim, args.real, detector, out_dir=args.out, resume_from=args.resume,
                             progress=progress_bar("gan"))
    print(f"✅ Final checkpoint: {result.checkpoints[-1]}")
    return EXIT_OK


def cmd_ensemble(args) -> int:
    from retinagan.core.pipeline import train_ensemble

    config = load_train_config(args)
    print(f"🚀 Training {args.n} ensemble members...")
    paths = train_ensemble(config, args.sim, args.real, args.detector, args.out, n_seeds=args.n,
                           workers=args.workers)
    for path in paths:
        print(f"  📁 {path}")
    print("✅ Ensemble complete")
    return EXIT_OK


def cmd_translate(args) -> int:
    from retinagan.core.pipeline import translate_dataset

    checkpoints = [c for c in args.ckpt.split(",") if c]
    print(f"🎨 Translating {args.data} ({args.direction}) with {len(checkpoints)} generator(s)...")
    manifest = translate_dataset(checkpoints, args.data, args.out, args.direction)
    print(f"✅ Translated dataset: {manifest}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from retinagan.core.detector import load_detector
    from retinagan.core.evaluation import emit_report, evaluate
    from retinagan.core.gan_nets import IdentityGenerator
    from retinagan.core.pipeline import load_bundle
    from scene_synth.dataset_io import load_dataset

    detector = load_detector(args.detector)
    generator = load_bundle(args.ckpt).G if args.ckpt else IdentityGenerator(image_size=detector.config.image_size)
    data = load_dataset(args.data, limit=args.limit)
    paired = load_dataset(args.paired)
    print(f"📊 Evaluating on {len(data)} images ({len(paired)} paired)...")
    report, overlays = evaluate(detector, generator, data, paired, seed=args.seed,
                                classifier_steps=args.classifier_steps)
    emit_report(report, args.out, overlays)
    for metric, value in report.metrics().items():
        print(f"  {metric}: {value:.4f}")
    if not report.domain_valid:
        print(f"❌ Domain classifier underfit (val accuracy {report.domain_val_accuracy:.3f}); "
              f"domain score flagged invalid")
        return EXIT_INVALID_SCORE
    print(f"✅ Report written to {args.out}")
    return EXIT_OK


def cmd_merge_data(args) -> int:
    from data_processor.merge_datasets import merge_datasets

    manifest = merge_datasets(args.datasets, args.weights, args.out)
    print(f"✅ Merged corpus: {manifest}")
    return EXIT_OK


def add_gan_arguments(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--sim", required=True, help="Sim dataset directory")
    parser.add_argument("--real", required=True, help="Real dataset directory")
    parser.add_argument("--out", required=True, help="Output directory")
    parser.add_argument("--config", help="TrainConfig file; flags override its values")
    parser.add_argument("--steps", type=int)
    parser.add_argument("--seed", type=int)
    parser.add_argument("--batch-size", type=int)
    parser.add_argument("--lambda-prcp", type=float)
    parser.add_argument("--lambda-cycle", type=float)
    parser.add_argument("--max-real-images", type=int, help="Restrict the real corpus (0 = all)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="retinagan", description="Sim-to-real translation with perception consistency")
    parser.add_argument("--log-file", help="Also write logs to this file")
    parser.add_argument("--log-level", default="INFO")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="Generate a synthetic labeled corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--num", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--style", choices=["sim", "real", "paired"], default="sim")
    p.add_argument("--size", type=int, default=64, help="Image side in pixels")
    p.add_argument("--num-classes", type=int, default=4)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-detector", help="Train and freeze the micro-detector")
    p.add_argument("--data", required=True, help="Comma-separated dataset directories (sim and real)")
    p.add_argument("--out", required=True, help="Detector checkpoint path")
    p.add_argument("--config", help="DetectorConfig file")
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--mix-ratio", type=float, help="Fraction of each batch drawn from sim")
    p.set_defaults(func=cmd_train_detector)

    p = sub.add_parser("detect", help="Run the detector on one image")
    p.add_argument("--ckpt", required=True, help="Detector checkpoint")
    p.add_argument("--image", required=True)
    p.add_argument("--out", help="Write detections as JSON here")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("train-gan", help="Train RetinaGAN (or plain CycleGAN with --no-detector)")
    add_gan_arguments(p)
    p.add_argument("--detector", help="Frozen detector checkpoint")
    p.add_argument("--no-detector", action="store_true", help="Plain CycleGAN baseline")
    p.add_argument("--resume", help="Checkpoint to resume from")
    p.set_defaults(func=cmd_train_gan)

    p = sub.add_parser("ensemble", help="Train several RetinaGAN members")
    add_gan_arguments(p)
    p.add_argument("--detector", required=True)
    p.add_argument("--n", type=int, default=3)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_ensemble)

    p = sub.add_parser("translate", help="Translate a dataset with one or more generators")
    p.add_argument("--ckpt", required=True, help="Comma-separated GAN checkpoints")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--direction", choices=["sim2real", "real2sim"], default="sim2real")
    p.set_defaults(func=cmd_translate)

    p = sub.add_parser("eval", help="Evaluate a sim-to-real generator")
    p.add_argument("--detector", required=True)
    p.add_argument("--ckpt", help="GAN checkpoint; omitted means the identity translation")
    p.add_argument("--data", required=True, help="Sim validation set")
    p.add_argument("--paired", required=True, help="Held-out paired sim/real set")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--limit", type=int, default=0)
    p.add_argument("--classifier-steps", type=int, default=300)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("merge-data", help="Merge datasets into one weighted corpus")
    p.add_argument("datasets", nargs="+")
    p.add_argument("--weights", type=float, nargs="*")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_merge_data)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging(args.log_file, args.log_level)

    if args.command == "train-gan" and not args.no_detector and not args.detector:
        parser.error("train-gan needs --detector (or --no-detector for the CycleGAN baseline)")
    try:
        return args.func(args)
    except RetinaGANError as e:
        logger.error(f"{type(e).__name__}: {e}")
        print(f"❌ {e}")
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
