"""Dataset ingestion, augmentation, and batch preparation.

On-disk layout: ``images/<id>.png`` with ``annotations/<id>/<k>.png``; a
manifest lists one record per line as tab-separated paths (image first, then
its annotation masks), resolved relative to the manifest's directory. Masks
are 8-bit PNGs where values above 127 mean edge.
"""
from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, replace

import numpy as np
from PIL import Image
from scipy import ndimage

from .backbone import FeatureBundle, FeatureCache, MaskGuidance, ProviderConfig, masks_to_guidance
from .errors import ConfigError, InputError
from .granularity import AnnotationSet, LabelLadder, make_ladder


@dataclass
class ManifestEntry:
    image_path: str
    annotation_paths: list[str]
    entry_id: str


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    split: str = "train"


@dataclass
class Sample:
    image: np.ndarray  # (H, W, 3) in [0, 1]
    annotations: AnnotationSet
    sample_id: str
    ladder: LabelLadder | None = None
    guidance: MaskGuidance | None = None


def stable_rng(*parts) -> np.random.Generator:
    """Generator seeded from a content hash; independent per (seed, epoch, id)."""
    digest = hashlib.sha256("|".join(str(p) for p in parts).encode()).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little"))


def load_manifest(path: str, split: str = "train") -> DatasetManifest:
    """Parse and validate a manifest; entries keep file order."""
    if not os.path.exists(path):
        raise InputError(f"manifest not found: {path}")
    root = os.path.dirname(os.path.abspath(path))
    entries = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            image_rel, ann_rels = parts[0], [p for p in parts[1:] if p]
            entry_id = os.path.splitext(os.path.basename(image_rel))[0]
            if not ann_rels:
                raise InputError(
                    f"manifest line {lineno} ({entry_id}): entry has no annotations"
                )
            image_path = os.path.join(root, image_rel)
            ann_paths = [os.path.join(root, p) for p in ann_rels]
            for p in [image_path] + ann_paths:
                if not os.path.exists(p):
                    raise InputError(f"manifest line {lineno} ({entry_id}): missing file {p}")
            entries.append(ManifestEntry(image_path, ann_paths, entry_id))
    return DatasetManifest(entries=entries, split=split)


def load_image_png(path: str) -> np.ndarray:
    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def load_mask_png(path: str) -> np.ndarray:
    with Image.open(path) as img:
        arr = np.asarray(img.convert("L"))
    return (arr > 127).astype(np.uint8)


def save_image_png(path: str, arr01: np.ndarray) -> None:
    data = np.rint(np.clip(arr01, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(data).save(path)


def save_mask_png(path: str, binary: np.ndarray) -> None:
    Image.fromarray((np.asarray(binary) > 0).astype(np.uint8) * 255).save(path)


def load_sample(entry: ManifestEntry) -> Sample:
    image = load_image_png(entry.image_path)
    labels = [load_mask_png(p) for p in entry.annotation_paths]
    for lab in labels:
        if lab.shape != image.shape[:2]:
            raise InputError(
                f"{entry.entry_id}: annotation shape {lab.shape} != image {image.shape[:2]}"
            )
    return Sample(image=image, annotations=AnnotationSet(labels), sample_id=entry.entry_id)


def load_samples(manifest: DatasetManifest) -> list[Sample]:
    return [load_sample(e) for e in manifest.entries]


# ---------------------------------------------------------------------------
# Augmentation


@dataclass
class AugmentConfig:
    """Geometric augmentation menu (flip/rotate/scale/crop), all optional.

    Defaults follow the usual multi-scale flip recipe for edge training but
    every knob is adjustable; the identity config leaves samples untouched.
    """

    hflip: bool = False
    vflip: bool = False
    rot90: bool = False
    scales: tuple[float, ...] = (1.0,)
    crop_size: int | None = None

    def is_identity(self) -> bool:
        return (
            not self.hflip
            and not self.vflip
            and not self.rot90
            and tuple(self.scales) == (1.0,)
            and self.crop_size is None
        )


def _scale_image(arr: np.ndarray, factor: float) -> np.ndarray:
    if factor == 1.0:
        return arr
    if arr.ndim == 3:
        return np.stack([_scale_image(arr[..., c], factor) for c in range(arr.shape[-1])], axis=-1)
    return ndimage.zoom(arr, factor, order=1, mode="nearest")


def _scale_mask(mask: np.ndarray, factor: float) -> np.ndarray:
    if factor == 1.0:
        return mask
    out = ndimage.zoom(mask.astype(np.float64), factor, order=0, mode="nearest")
    return (out > 0.5).astype(np.uint8)


@dataclass
class GeoTransform:
    """One concrete geometric transform, applied identically to every map."""

    scale: float = 1.0
    hflip: bool = False
    vflip: bool = False
    quarter_turns: int = 0
    crop_origin: tuple[int, int] | None = None
    crop_size: int | None = None

    def apply(self, arr: np.ndarray, binary: bool) -> np.ndarray:
        out = _scale_mask(arr, self.scale) if binary else _scale_image(arr, self.scale)
        if self.hflip:
            out = np.flip(out, axis=1)
        if self.vflip:
            out = np.flip(out, axis=0)
        if self.quarter_turns:
            out = np.rot90(out, k=self.quarter_turns, axes=(0, 1))
        if self.crop_size is not None:
            r, c = self.crop_origin
            s = self.crop_size
            if r + s > out.shape[0] or c + s > out.shape[1]:
                raise ConfigError(
                    f"crop {s} at {(r, c)} exceeds image of size {out.shape[:2]}"
                )
            out = out[r : r + s, c : c + s]
        return np.ascontiguousarray(out)


def draw_transform(
    cfg: AugmentConfig, rng: np.random.Generator, image_shape: tuple[int, int]
) -> GeoTransform:
    scale = float(rng.choice(np.asarray(cfg.scales, dtype=np.float64)))
    hflip = bool(cfg.hflip and rng.random() < 0.5)
    vflip = bool(cfg.vflip and rng.random() < 0.5)
    turns = int(rng.integers(0, 4)) if cfg.rot90 else 0
    origin = None
    if cfg.crop_size is not None:
        h = int(round(image_shape[0] * scale))
        w = int(round(image_shape[1] * scale))
        if turns % 2 == 1:
            h, w = w, h
        if cfg.crop_size > h or cfg.crop_size > w:
            raise ConfigError(
                f"crop_size {cfg.crop_size} larger than image {(h, w)} after scale/rotation"
            )
        origin = (
            int(rng.integers(0, h - cfg.crop_size + 1)),
            int(rng.integers(0, w - cfg.crop_size + 1)),
        )
    return GeoTransform(
        scale=scale,
        hflip=hflip,
        vflip=vflip,
        quarter_turns=turns,
        crop_origin=origin,
        crop_size=cfg.crop_size,
    )


def apply_transform(sample: Sample, tf: GeoTransform) -> Sample:
    """Apply one transform to the image and every annotation.

    Cached ladder/guidance are dropped; both are rebuilt downstream from the
    transformed maps so crop-induced reorderings stay exact.
    """
    image = tf.apply(sample.image, binary=False)
    labels = [tf.apply(lab, binary=True) for lab in sample.annotations.labels]
    return Sample(
        image=image,
        annotations=AnnotationSet(labels),
        sample_id=sample.sample_id,
    )


def augment(sample: Sample, rng: np.random.Generator, cfg: AugmentConfig) -> Sample:
    if cfg.is_identity():
        return replace(sample, ladder=None, guidance=None)
    return apply_transform(sample, draw_transform(cfg, rng, sample.image.shape[:2]))


# ---------------------------------------------------------------------------
# Batch preparation


@dataclass
class TrainRecord:
    sample_id: str
    image: np.ndarray
    bundle: FeatureBundle
    ladder: LabelLadder
    guidance: MaskGuidance


@dataclass
class ConsensusConfig:
    zeta: float = 0.2
    seed: int = 0
    epoch: int = 0


def prepare_records(
    samples: list[Sample],
    provider,
    pcfg: ProviderConfig,
    consensus: ConsensusConfig,
    cache: FeatureCache | None = None,
) -> list[TrainRecord]:
    """Extract features, build ladders, sample consensus, derive guidance.

    The consensus draw is seeded per (seed, epoch, sample id), so every epoch
    resamples and any worker split reproduces the same stream.
    """
    records = []
    for sample in samples:
        try:
            if cache is not None:
                bundle = cache.get_or_extract(sample.image, provider, pcfg)
            else:
                bundle = provider.extract(sample.image)
        except Exception as exc:
            raise type(exc)(f"provider failed on sample {sample.sample_id}: {exc}") from exc
        rng = stable_rng(consensus.seed, consensus.epoch, sample.sample_id, "consensus")
        ladder = make_ladder(sample.annotations, consensus.zeta, rng)
        guidance = masks_to_guidance(bundle.object_masks, shape=sample.image.shape[:2])
        records.append(
            TrainRecord(
                sample_id=sample.sample_id,
                image=sample.image,
                bundle=bundle,
                ladder=ladder,
                guidance=guidance,
            )
        )
    return records


def group_by_size(records: list[TrainRecord], batch_size: int) -> list[list[TrainRecord]]:
    """Split records into batches of equal spatial size, preserving order."""
    batches: list[list[TrainRecord]] = []
    open_batches: dict[tuple[int, int], list[TrainRecord]] = {}
    for rec in records:
        key = rec.image.shape[:2]
        bucket = open_batches.setdefault(key, [])
        bucket.append(rec)
        if len(bucket) == batch_size:
            batches.append(bucket)
            open_batches[key] = []
    for bucket in open_batches.values():
        if bucket:
            batches.append(bucket)
    return batches


def prepare_batch(
    samples: list[Sample],
    provider,
    pcfg: ProviderConfig,
    consensus: ConsensusConfig,
    batch_size: int = 3,
    cache: FeatureCache | None = None,
) -> list[list[TrainRecord]]:
    records = prepare_records(samples, provider, pcfg, consensus, cache=cache)
    return group_by_size(records, batch_size)
