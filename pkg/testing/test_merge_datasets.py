#!/usr/bin/env python3
"""Weighted corpus merging and sampling."""

import json
import os

import numpy as np
import pytest

from data_processor.merge_datasets import DatasetMerger, merge_datasets, normalize_weights, sample_weighted
from retinagan.core.errors import DatasetError
from scene_synth.dataset_io import load_dataset, read_manifest


def test_normalize_weights():
    assert normalize_weights(None, 4) == [0.25] * 4
    assert normalize_weights([3, 1], 2) == [0.75, 0.25]
    with pytest.raises(DatasetError):
        normalize_weights([1.0], 2)
    with pytest.raises(DatasetError):
        normalize_weights([1.0, -1.0], 2)
    with pytest.raises(DatasetError):
        normalize_weights([0.0, 0.0], 2)


def test_merge_carries_source_and_weight(tmp_path, tiny_datasets):
    out = str(tmp_path / "merged")
    manifest = merge_datasets([tiny_datasets["sim"], tiny_datasets["real"]], [3.0, 1.0], out)
    records = read_manifest(manifest)
    assert len(records) == 8
    by_source = {}
    for record in records:
        by_source.setdefault(record["source"], []).append(record["weight"])
    assert by_source[tiny_datasets["sim"]] == [pytest.approx(0.75 / 4)] * 4
    assert by_source[tiny_datasets["real"]] == [pytest.approx(0.25 / 4)] * 4
    assert sum(r["weight"] for r in records) == pytest.approx(1.0)

    images = load_dataset(manifest)
    originals = load_dataset(tiny_datasets["sim"])
    np.testing.assert_array_equal(images[0].pixels, originals[0].pixels)
    np.testing.assert_array_equal(images[0].boxes, originals[0].boxes)

    with open(os.path.join(out, "merge_stats.json"), "r", encoding="utf-8") as f:
        assert json.load(f)["statistics"]["total_records"] == 8


def test_duplicate_images_are_skipped(tmp_path, tiny_datasets):
    merger = DatasetMerger(str(tmp_path / "merged"))
    merger.merge_all([tiny_datasets["sim"], tiny_datasets["sim"]], [0.5, 0.5])
    assert len(merger.records) == 4
    assert merger.stats["duplicates_skipped"] == 4


def test_nothing_to_merge(tmp_path):
    with pytest.raises(DatasetError):
        merge_datasets([], None, str(tmp_path))


def test_weighted_sampling(tmp_path, tiny_datasets):
    manifest = merge_datasets([tiny_datasets["sim"], tiny_datasets["real"]], [1.0, 0.0], str(tmp_path / "m"))
    first = sample_weighted(manifest, 6, seed=1)
    second = sample_weighted(manifest, 6, seed=1)
    assert len(first) == 6
    assert all(img.domain == "sim" for img in first)
    for a, b in zip(first, second):
        np.testing.assert_array_equal(a.pixels, b.pixels)
