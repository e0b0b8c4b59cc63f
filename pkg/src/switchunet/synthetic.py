"""Synthetic blob images with exact masks, for smoke tests and demos."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .patches import write_gray, write_manifest, write_mask


def blob_image(size: int, rng: np.random.Generator, max_blobs: int = 3) -> tuple[np.ndarray, np.ndarray]:
    """One noisy grayscale image with bright elliptical blobs and its binary mask."""
    yy, xx = np.mgrid[0:size, 0:size]
    mask = np.zeros((size, size), dtype=bool)
    for _ in range(rng.integers(1, max_blobs + 1)):
        cy, cx = rng.uniform(0.2, 0.8, size=2) * size
        ry, rx = rng.uniform(0.08, 0.22, size=2) * size
        mask |= ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
    background = rng.uniform(20, 70) + rng.normal(0, 8, size=(size, size))
    foreground = rng.uniform(170, 220) + rng.normal(0, 8, size=(size, size))
    image = np.where(mask, foreground, background)
    return np.clip(np.rint(image), 0, 255).astype(np.uint8), mask.astype(np.uint8)


def make_blob_dataset(
    out_dir,
    n_train: int = 8,
    n_val: int = 2,
    n_test: int = 2,
    size: int = 64,
    seed: int = 0,
) -> Path:
    """Write PNG images/masks plus ``manifest.csv``; returns the manifest path."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "masks").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    rows = []
    splits = ["train"] * n_train + ["val"] * n_val + ["test"] * n_test
    for i, split in enumerate(splits):
        image, mask = blob_image(size, rng)
        name = f"img{i:03d}.png"
        write_gray(out_dir / "images" / name, image)
        write_mask(out_dir / "masks" / name, mask)
        rows.append((f"images/{name}", f"masks/{name}", i % 10 + 1, split))
    manifest = out_dir / "manifest.csv"
    write_manifest(manifest, rows)
    return manifest
