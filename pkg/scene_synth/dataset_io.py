#!/usr/bin/env python3
"""
Dataset Export and Loading
PNG images plus a JSON manifest; see `write_images` for the record layout.
"""

import json
import logging
import os
import tempfile
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

from retinagan.core.errors import BoxError, DatasetError
from retinagan.core.boxes import validate_boxes
from retinagan.core.images import LabeledImage, to_uint8

from .renderer import STYLES, render
from .scene_generator import Scene, SceneConfig, corpus_seeds, sample_scene

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
IMAGE_DIR = "images"
RECORD_KEYS = ("image", "domain", "seed", "boxes", "classes")


def save_png(pixels: np.ndarray, path: str) -> None:
    try:
        Image.fromarray(to_uint8(pixels), "RGB").save(path, format="PNG")
    except OSError as e:
        raise DatasetError(f"cannot write image: {e}", path=path) from e


def load_png(path: str) -> np.ndarray:
    try:
        with Image.open(path) as img:
            return np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
    except OSError as e:
        raise DatasetError(f"cannot read image: {e}", path=path) from e


def write_json_atomic(data, path: str) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    try:
        fd, tmp_path = tempfile.mkstemp(prefix=".manifest-", dir=directory)
        with os.fdopen(fd, "w", encoding="utf-8") as f:
            json.dump(data, f, indent=2, ensure_ascii=False)
        os.replace(tmp_path, path)
    except OSError as e:
        raise DatasetError(f"cannot write manifest: {e}", path=path) from e


def make_record(image_name: str, image: LabeledImage, extra: Optional[Dict] = None) -> Dict:
    record = {
        "image": image_name,
        "domain": image.domain,
        "seed": int(image.seed),
        "boxes": [[float(c) for c in box] for box in image.boxes],
        "classes": [int(c) for c in image.classes],
    }
    if extra:
        record.update(extra)
    return record


def write_images(images: Sequence[Tuple[str, LabeledImage, Optional[Dict]]], out_dir: str) -> str:
    """
    Write (file stem, image, extra record fields) triples as one dataset.

    Each record is {image, domain, seed, boxes, classes} in that key order,
    followed by any extra fields (translations add `provenance`).

    Returns:
        Path of the manifest
    """
    image_dir = os.path.join(out_dir, IMAGE_DIR)
    try:
        os.makedirs(image_dir, exist_ok=True)
    except OSError as e:
        raise DatasetError(f"cannot create dataset directory: {e}", path=image_dir) from e

    records = []
    for stem, image, extra in images:
        relative = f"{IMAGE_DIR}/{stem}.png"
        save_png(image.pixels, os.path.join(out_dir, relative))
        records.append(make_record(relative, image, extra))

    manifest_path = os.path.join(out_dir, MANIFEST_NAME)
    write_json_atomic(records, manifest_path)
    logger.info(f"Wrote {len(records)} images to {out_dir}")
    return manifest_path


def export_dataset(scenes: Sequence[Scene], styles: Sequence[str], out_dir: str) -> str:
    """Render every scene in every style to `<out_dir>/images/<seed>_<style>.png` plus the manifest."""
    for style in styles:
        if style not in STYLES:
            raise DatasetError(f"unknown style {style!r}")
    rendered = ((f"{scene.seed}_{style}", render(scene, style), None) for scene in scenes for style in styles)
    return write_images(list(rendered), out_dir)


def generate_corpus(out_dir: str, num: int, seed: int, style: str, config: Optional[SceneConfig] = None,
                    progress: Optional[Callable[[Iterable], Iterable]] = None) -> str:
    """
    Sample and export `num` scenes. `style` is sim, real or paired; paired
    renders both styles of scenes drawn from the held-out seed range.
    """
    if style not in ("sim", "real", "paired"):
        raise DatasetError(f"style must be sim, real or paired, got {style!r}")
    config = config or SceneConfig()
    seeds = corpus_seeds(style, seed, num)
    if progress is not None:
        seeds = progress(seeds)
    scenes = [sample_scene(s, config) for s in seeds]
    styles = list(STYLES) if style == "paired" else [style]
    return export_dataset(scenes, styles, out_dir)


def manifest_path_for(path: str) -> str:
    return os.path.join(path, MANIFEST_NAME) if os.path.isdir(path) else path


def read_manifest(path: str) -> List[Dict]:
    manifest = manifest_path_for(path)
    try:
        with open(manifest, "r", encoding="utf-8") as f:
            records = json.load(f)
    except OSError as e:
        raise DatasetError(f"cannot read manifest: {e}", path=manifest) from e
    except json.JSONDecodeError as e:
        raise DatasetError(f"manifest is not valid JSON: {e}", path=manifest) from e
    if not isinstance(records, list):
        raise DatasetError("manifest must be a JSON array of records", path=manifest)
    return records


def record_to_image(record: Dict, base_dir: str, index: int, manifest: str) -> LabeledImage:
    missing = [k for k in RECORD_KEYS if k not in record]
    if missing:
        raise DatasetError(f"record lacks {missing}", path=manifest, record_index=index)
    if len(record["boxes"]) != len(record["classes"]):
        raise DatasetError("boxes and classes differ in length", path=manifest, record_index=index)
    try:
        boxes = validate_boxes(np.asarray(record["boxes"], dtype=np.float64).reshape(-1, 4))
    except (BoxError, ValueError) as e:
        raise DatasetError(f"invalid boxes: {e}", path=manifest, record_index=index) from e
    image_path = os.path.join(base_dir, record["image"])
    if not os.path.exists(image_path):
        raise DatasetError(f"image {record['image']} not found", path=manifest, record_index=index)
    return LabeledImage(pixels=load_png(image_path), boxes=boxes, classes=record["classes"],
                        domain=record["domain"], seed=int(record["seed"]))


def load_dataset(path: str, limit: int = 0) -> List[LabeledImage]:
    """
    Load a dataset directory (or manifest path) into LabeledImages.

    Args:
        path: Dataset directory or its manifest.json
        limit: Load only the first `limit` records when > 0

    Raises:
        DatasetError: naming the manifest and record index of the first bad record
    """
    manifest = manifest_path_for(path)
    base_dir = os.path.dirname(os.path.abspath(manifest))
    records = read_manifest(manifest)
    if limit > 0:
        records = records[:limit]
    return [record_to_image(r, base_dir, i, manifest) for i, r in enumerate(records)]
