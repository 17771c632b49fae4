"""Synthetic scene generation for experiments and self-contained tests.

Produces small PNG datasets whose images carry enough class-correlated
texture that a network can actually learn them: each label region gets a
base color plus pixel noise.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .dataset import SampleManifest, write_manifest


def random_label_map(rng: np.random.Generator, h: int, w: int, num_classes: int,
                     regions: int = 6) -> np.ndarray:
    """A label map tiled from random axis-aligned rectangles."""
    label = np.full((h, w), int(rng.integers(0, num_classes)), dtype=np.int64)
    for _ in range(regions):
        cls = int(rng.integers(0, num_classes))
        r0 = int(rng.integers(0, h))
        c0 = int(rng.integers(0, w))
        r1 = int(rng.integers(r0 + 1, h + 1))
        c1 = int(rng.integers(c0 + 1, w + 1))
        label[r0:r1, c0:c1] = cls
    return label


def render_scene(rng: np.random.Generator, label: np.ndarray, num_classes: int,
                 noise: float = 0.08) -> np.ndarray:
    """An RGB uint8 image whose colors follow the label regions."""
    palette_rng = np.random.default_rng(num_classes)  # stable class->color map
    base = palette_rng.uniform(0.15, 0.85, size=(num_classes, 3))
    img = base[label] + rng.normal(0.0, noise, size=(*label.shape, 3))
    return (np.clip(img, 0.0, 1.0) * 255).astype(np.uint8)


def synthetic_samples(count: int, h: int, w: int, num_classes: int,
                      seed: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """(rgb uint8 HxWx3, label int HxW) pairs, deterministic in the seed."""
    rng = np.random.default_rng(seed)
    samples = []
    for _ in range(count):
        label = random_label_map(rng, h, w, num_classes)
        samples.append((render_scene(rng, label, num_classes), label))
    return samples


def write_png_dataset(root, role: str,
                      samples: list[tuple[np.ndarray, np.ndarray]]) -> Path:
    """Write samples as PNG pairs plus a manifest; returns the manifest path."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "labels").mkdir(parents=True, exist_ok=True)
    entries = []
    for i, (rgb, label) in enumerate(samples):
        img_path = root / "images" / f"{role}_{i:04d}.png"
        lab_path = root / "labels" / f"{role}_{i:04d}.png"
        Image.fromarray(rgb, mode="RGB").save(img_path)
        Image.fromarray(label.astype(np.uint8), mode="L").save(lab_path)
        entries.append((img_path, lab_path))
    manifest_path = root / f"{role}.txt"
    write_manifest(SampleManifest(role=role, entries=tuple(entries)), manifest_path)
    return manifest_path
