#!/usr/bin/env python3
"""
Training Corpus Consolidator
Merges several labeled datasets (sim, real, GAN-adapted) into one corpus
whose records carry their source and sampling weight.
"""
import json
import logging
import os
import shutil
import sys
from collections import defaultdict
from typing import Dict, List, Optional, Sequence

import numpy as np

sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from retinagan.core.errors import DatasetError
from retinagan.core.images import LabeledImage
from scene_synth.dataset_io import (IMAGE_DIR, MANIFEST_NAME, load_dataset, manifest_path_for, read_manifest,
                                    record_to_image, write_json_atomic)

logger = logging.getLogger(__name__)


class DatasetMerger:
    def __init__(self, out_dir: str):
        self.out_dir = out_dir
        self.records: List[Dict] = []
        self.seen_images = set()
        self.stats = defaultdict(int)

    def _source_name(self, data_dir: str, index: int) -> str:
        base = os.path.basename(os.path.normpath(data_dir)) or "dataset"
        return f"s{index}_{base}"

    def merge_source(self, data_dir: str, weight: float, index: int) -> int:
        """Copy one dataset's images into the corpus; returns the number of records added"""
        manifest = manifest_path_for(data_dir)
        base_dir = os.path.dirname(os.path.abspath(manifest))
        records = read_manifest(manifest)
        name = self._source_name(data_dir, index)
        logger.info(f"Merging {len(records)} records from {data_dir} (weight {weight})")

        kept = []
        for i, record in enumerate(records):
            record_to_image(record, base_dir, i, manifest)
            source_path = os.path.abspath(os.path.join(base_dir, record["image"]))
            if source_path in self.seen_images:
                self.stats["duplicates_skipped"] += 1
                continue
            self.seen_images.add(source_path)
            target = f"{IMAGE_DIR}/{name}_{os.path.basename(record['image'])}"
            try:
                shutil.copyfile(source_path, os.path.join(self.out_dir, target))
            except OSError as e:
                raise DatasetError(f"cannot copy image: {e}", path=source_path, record_index=i) from e
            merged = dict(record)
            merged["image"] = target
            merged["source"] = data_dir
            kept.append(merged)

        # The source's weight is shared evenly between its records
        for merged in kept:
            merged["weight"] = weight / len(kept)
        self.records.extend(kept)
        self.stats[f"{name}_records"] = len(kept)
        for merged in kept:
            self.stats[f"domain_{merged['domain']}"] += 1
        return len(kept)

    def merge_all(self, data_dirs: Sequence[str], weights: Sequence[float]) -> str:
        os.makedirs(os.path.join(self.out_dir, IMAGE_DIR), exist_ok=True)
        for index, (data_dir, weight) in enumerate(zip(data_dirs, weights)):
            self.merge_source(data_dir, weight, index)
        if not self.records:
            raise DatasetError("merged corpus is empty", path=self.out_dir)

        manifest = os.path.join(self.out_dir, MANIFEST_NAME)
        write_json_atomic(self.records, manifest)
        self.stats["total_records"] = len(self.records)
        with open(os.path.join(self.out_dir, "merge_stats.json"), "w", encoding="utf-8") as f:
            json.dump({"sources": list(data_dirs), "weights": list(weights), "statistics": dict(self.stats)},
                      f, indent=2, ensure_ascii=False)
        return manifest

    def print_final_stats(self) -> None:
        print("\n🎉 MERGE COMPLETE!")
        print("=" * 50)
        for key, value in sorted(self.stats.items()):
            print(f"  {key}: {value}")
        print(f"\n📁 OUTPUT: {self.out_dir}/{MANIFEST_NAME}")


def normalize_weights(weights: Optional[Sequence[float]], count: int) -> List[float]:
    if weights is None or len(weights) == 0:
        return [1.0 / count] * count
    if len(weights) != count:
        raise DatasetError(f"{len(weights)} weights for {count} datasets")
    if any(w < 0 for w in weights) or sum(weights) <= 0:
        raise DatasetError(f"weights must be non-negative with a positive sum, got {list(weights)}")
    total = float(sum(weights))
    return [float(w) / total for w in weights]


def merge_datasets(data_dirs: Sequence[str], weights: Optional[Sequence[float]], out_dir: str) -> str:
    """
    Merge datasets into `out_dir` with explicit mixing weights.

    Args:
        data_dirs: Dataset directories (or manifests)
        weights: Relative share of each dataset, normalized to sum to 1; None means equal shares
        out_dir: Corpus directory

    Returns:
        Path of the merged manifest; every record gains `source` and `weight`
    """
    if not data_dirs:
        raise DatasetError("nothing to merge")
    merger = DatasetMerger(out_dir)
    return merger.merge_all(list(data_dirs), normalize_weights(weights, len(data_dirs)))


def sample_weighted(manifest: str, n: int, seed: int = 0) -> List[LabeledImage]:
    """Draw `n` images with replacement, proportionally to record weights (uniform when absent)."""
    path = manifest_path_for(manifest)
    records = read_manifest(path)
    if not records:
        raise DatasetError("cannot sample from an empty manifest", path=path)
    weights = np.array([float(r.get("weight", 1.0)) for r in records])
    if weights.sum() <= 0:
        raise DatasetError("record weights sum to zero", path=path)
    rng = np.random.default_rng(seed)
    picks = rng.choice(len(records), size=n, replace=True, p=weights / weights.sum())
    images = load_dataset(path)
    return [images[int(i)] for i in picks]


def main():
    import argparse

    from retinagan.core.logging_setup import setup_logging

    parser = argparse.ArgumentParser(description="Merge labeled datasets into one weighted corpus")
    parser.add_argument("datasets", nargs="+", help="Dataset directories")
    parser.add_argument("--weights", type=float, nargs="*", default=None)
    parser.add_argument("--out", required=True)
    args = parser.parse_args()

    setup_logging()
    merger = DatasetMerger(args.out)
    merger.merge_all(args.datasets, normalize_weights(args.weights, len(args.datasets)))
    merger.print_final_stats()


if __name__ == "__main__":
    main()
