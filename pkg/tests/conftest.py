"""Shared fixtures: synthetic image trees and tiny model configs."""

import numpy as np
import pytest
from PIL import Image

from vitbench.data import DatasetManifest, Sample
from vitbench.vit import VitConfig


def write_image_tree(root, n_normal, n_abnormal, size=16, seed=0, fmt="png"):
    """Write a two-class PNG tree with class-dependent texture.

    Normal images carry a bright center blob, abnormal ones a bright
    corner, so a small model can separate them.
    """
    rng = np.random.default_rng(seed)
    (root / "normal").mkdir(parents=True, exist_ok=True)
    (root / "abnormal").mkdir(parents=True, exist_ok=True)
    q = size // 4
    for i in range(n_normal):
        img = rng.uniform(0.1, 0.3, size=(size, size, 3))
        img[q:3 * q, q:3 * q] += 0.6
        arr = (np.clip(img, 0, 1) * 255).astype(np.uint8)
        Image.fromarray(arr).save(root / "normal" / f"n{i:03d}.{fmt}")
    for i in range(n_abnormal):
        img = rng.uniform(0.1, 0.3, size=(size, size, 3))
        img[:q + 1, :q + 1] += 0.65
        arr = (np.clip(img, 0, 1) * 255).astype(np.uint8)
        Image.fromarray(arr).save(root / "abnormal" / f"a{i:03d}.{fmt}")
    return root


def singleton_manifest(n_normal, n_abnormal):
    """In-memory manifest where every sample is its own group."""
    samples = []
    for i in range(n_normal):
        samples.append(Sample(path=f"n{i}.png", raw_label="normal", label=0,
                              group_id=f"n{i}"))
    for i in range(n_abnormal):
        samples.append(Sample(path=f"a{i}.png", raw_label="abnormal", label=1,
                              group_id=f"a{i}"))
    return DatasetManifest(
        samples=tuple(samples),
        class_counts={0: n_normal, 1: n_abnormal},
        class_map={"normal": 0, "abnormal": 1},
        skipped=(),
    )


def grouped_manifest(groups):
    """Manifest from [(group_id, label, n_samples), ...] specs."""
    samples = []
    counts = {0: 0, 1: 0}
    for gid, label, n in groups:
        for j in range(n):
            samples.append(Sample(path=f"{gid}_{j}.png",
                                  raw_label="abnormal" if label else "normal",
                                  label=label, group_id=gid))
            counts[label] += 1
    return DatasetManifest(
        samples=tuple(samples),
        class_counts={k: v for k, v in counts.items() if v},
        class_map={"normal": 0, "abnormal": 1},
        skipped=(),
    )


@pytest.fixture
def image_tree(tmp_path):
    return write_image_tree(tmp_path / "data", n_normal=6, n_abnormal=10)


@pytest.fixture
def tiny_config():
    return VitConfig(image_size=16, patch_size=8, embed_dim=8, depth=1,
                     num_heads=2, mlp_ratio=2.0)
