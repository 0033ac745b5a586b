"""Synthetic shape datasets for desk-scale experiments.

Images contain a few flat-intensity shapes on a plain background; annotators
mark nested subsets of the shape boundaries (annotator 1 the most salient
shape only, later annotators add more), yielding a natural granularity
ladder. Boundaries are single-pixel rings at the intensity steps.
"""
from __future__ import annotations

import os

import numpy as np
from scipy import ndimage

from .data import save_image_png, save_mask_png


def _disk(shape: tuple[int, int], center: tuple[float, float], radius: float) -> np.ndarray:
    rr, cc = np.indices(shape)
    return ((rr - center[0]) ** 2 + (cc - center[1]) ** 2 <= radius**2).astype(np.uint8)


def _rect(shape: tuple[int, int], r0: int, c0: int, r1: int, c1: int) -> np.ndarray:
    m = np.zeros(shape, dtype=np.uint8)
    m[r0:r1, c0:c1] = 1
    return m


def inner_ring(mask: np.ndarray) -> np.ndarray:
    """Single-pixel boundary just inside a filled region."""
    eroded = ndimage.binary_erosion(mask.astype(bool), border_value=0)
    return (mask.astype(bool) & ~eroded).astype(np.uint8)


def make_shapes_sample(
    seed: int, size: int = 64, n_annotators: int = 3
) -> tuple[np.ndarray, list[np.ndarray]]:
    """One image plus nested annotator boundary maps."""
    rng = np.random.default_rng(seed)
    shape = (size, size)
    image = np.full((size, size, 3), 0.15)

    # disjoint placements: square top-left, disk top-right, bar bottom-left
    q = size // 4
    regions = []
    r0 = int(rng.integers(q // 4, q // 2))
    c0 = int(rng.integers(q // 4, q // 2))
    regions.append(_rect(shape, r0, c0, r0 + q + q // 2, c0 + q + q // 2))
    center = (q + int(rng.integers(-2, 3)), size - q + int(rng.integers(-2, 3)))
    regions.append(_disk(shape, center, q * 0.6))
    r2 = int(rng.integers(size // 2 + q // 2, size - q - 2))
    regions.append(_rect(shape, r2, q // 2, r2 + q - 2, q // 2 + q + 2))

    intensities = (0.85, 0.55, 0.35)
    for region, intensity in zip(regions, intensities):
        for ch, tint in enumerate((1.0, 0.9, 0.8)):
            plane = image[:, :, ch]
            plane[region > 0] = intensity * tint

    rings = [inner_ring(m) for m in regions]
    annotations = []
    acc = np.zeros(shape, dtype=np.uint8)
    for k in range(n_annotators):
        acc = acc | rings[min(k, len(rings) - 1)]
        annotations.append(acc.copy())
    return image, annotations


def build_toy_dataset(
    out_dir: str,
    n_images: int = 2,
    size: int = 64,
    n_annotators: int = 3,
    seed: int = 0,
) -> str:
    """Write a PNG dataset plus manifest; returns the manifest path."""
    images_dir = os.path.join(out_dir, "images")
    ann_dir = os.path.join(out_dir, "annotations")
    os.makedirs(images_dir, exist_ok=True)
    lines = []
    for i in range(n_images):
        image, annotations = make_shapes_sample(seed + i, size=size, n_annotators=n_annotators)
        image_id = f"img{i:03d}"
        save_image_png(os.path.join(images_dir, image_id + ".png"), image)
        sample_ann_dir = os.path.join(ann_dir, image_id)
        os.makedirs(sample_ann_dir, exist_ok=True)
        ann_rel = []
        for k, ann in enumerate(annotations):
            rel = os.path.join("annotations", image_id, f"{k}.png")
            save_mask_png(os.path.join(out_dir, rel), ann)
            ann_rel.append(rel)
        lines.append("\t".join([os.path.join("images", image_id + ".png")] + ann_rel))
    manifest_path = os.path.join(out_dir, "manifest.tsv")
    with open(manifest_path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    return manifest_path
