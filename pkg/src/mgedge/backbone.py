"""Frozen feature providers and mask-derived guidance.

Two providers implement the same contract: a deterministic toy backbone for
tests and CI (pure function of image and seed, no checkpoint), and an adapter
for a real pretrained segmentation foundation model. Providers are frozen:
they expose no trainable parameters and extraction mutates no state, so a
provider instance may be shared across workers.
"""
from __future__ import annotations

import hashlib
import os
import struct
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import ConfigError, DimensionError, ProviderLoadError

SOBEL_X = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=np.float64)
SOBEL_Y = SOBEL_X.T


@dataclass
class FeatureBundle:
    """Frozen-backbone outputs for one image.

    Grids are channels-last numpy arrays: ``shallow_features`` and
    ``image_embedding`` are (D, D, C); ``mask_embeddings`` is
    (n_prompts, d_m, d_m, C_m) with one embedding per prompt point;
    ``object_masks`` holds one binary (H, W) grid per prompt.
    """

    shallow_features: np.ndarray
    image_embedding: np.ndarray
    mask_embeddings: np.ndarray
    object_masks: list[np.ndarray]
    source_size: tuple[int, int]

    def validate(self) -> "FeatureBundle":
        if self.shallow_features.ndim != 3 or self.image_embedding.ndim != 3:
            raise DimensionError("feature grids must be (D, D, C)")
        if self.shallow_features.shape[:2] != self.image_embedding.shape[:2]:
            raise DimensionError("shallow and image features disagree on spatial size")
        if self.mask_embeddings.ndim != 4:
            raise DimensionError("mask embeddings must be (n, d_m, d_m, C)")
        for arr in (self.shallow_features, self.image_embedding, self.mask_embeddings):
            if not np.all(np.isfinite(arr)):
                raise ValueError("feature bundle contains non-finite entries")
        return self


@dataclass
class MaskGuidance:
    """Edges of provider object masks and their cross-mask agreement.

    ``edge_union`` is the binary union of per-mask Sobel edges;
    ``edge_frequency`` is the fraction of masks whose edge covers each pixel,
    so it lies in [0, 1] and is bounded by ``edge_union`` pointwise.
    """

    edge_union: np.ndarray
    edge_frequency: np.ndarray
    n_masks: int


@dataclass
class ProviderConfig:
    provider_kind: str = "toy"  # {"toy", "pretrained_adapter"}
    grid_side: int = 8
    checkpoint_path: str | None = None
    seed: int | None = 0
    # toy backbone shape knobs
    feature_size: int = 16
    shallow_channels: int = 8
    embed_channels: int = 8
    mask_channels: int = 4
    mask_embed_size: int = 8
    region_tau: float = 0.08

    def __post_init__(self):
        if self.grid_side < 1:
            raise ConfigError("grid_side must be >= 1")
        if self.provider_kind == "toy" and self.seed is None:
            raise ConfigError("toy provider requires a seed")

    @property
    def n_prompts(self) -> int:
        return self.grid_side * self.grid_side

    def fingerprint(self) -> str:
        """Identity string used as part of feature-cache keys."""
        if self.provider_kind == "toy":
            return (
                f"toy-s{self.seed}-g{self.grid_side}-d{self.feature_size}"
                f"-c{self.shallow_channels}.{self.embed_channels}.{self.mask_channels}"
                f"-m{self.mask_embed_size}"
            )
        return f"pretrained-g{self.grid_side}"


def _check_image(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3:
        raise DimensionError(f"expected (H, W, 3) image, got {image.shape}")
    if image.shape[0] < 16 or image.shape[1] < 16:
        raise DimensionError(f"image too small: {image.shape[:2]}, need >= 16x16")
    if image.min() < 0.0 or image.max() > 1.0:
        raise ValueError("image values must lie in [0, 1]")
    return image


def _resize_bilinear(arr: np.ndarray, out_hw: tuple[int, int]) -> np.ndarray:
    """Bilinear resample of a 2-D grid with pixel-center alignment."""
    h, w = arr.shape
    oh, ow = out_hw
    if (h, w) == (oh, ow):
        return arr.astype(np.float64, copy=True)
    rows = (np.arange(oh) + 0.5) * h / oh - 0.5
    cols = (np.arange(ow) + 0.5) * w / ow - 0.5
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    return ndimage.map_coordinates(
        arr.astype(np.float64), [rr, cc], order=1, mode="nearest"
    )


class ToyBackbone:
    """Deterministic checkpoint-free provider built from smoothing/gradient pyramids.

    Shallow features are seeded mixtures of oriented Gaussian-derivative
    responses only, so they carry high-frequency content and vanish on constant
    images. The image embedding mixes heavily smoothed color channels (low
    frequency). Object masks are connected intensity regions grown from each
    prompt point of the grid. Everything is a pure function of (image, seed).
    """

    def __init__(self, cfg: ProviderConfig):
        if cfg.seed is None:
            raise ConfigError("toy provider requires a seed")
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        # fixed channel-mixing matrices; drawn once per seed, never trained
        self._mix_shallow = rng.standard_normal((9, cfg.shallow_channels))
        self._mix_embed = rng.standard_normal((7, cfg.embed_channels))
        self._mix_mask = rng.standard_normal((4, cfg.mask_channels))

    def state_hash(self) -> str:
        """Digest of the provider's fixed state; unchanged by extraction or training."""
        digest = hashlib.sha256()
        for arr in (self._mix_shallow, self._mix_embed, self._mix_mask):
            digest.update(np.ascontiguousarray(arr).tobytes())
        return digest.hexdigest()

    def extract(self, image: np.ndarray) -> FeatureBundle:
        image = _check_image(image)
        cfg = self.cfg
        h, w = image.shape[:2]
        gray = image.mean(axis=2)
        d = cfg.feature_size

        grad_stack = []
        for sigma in (1.0, 2.0, 4.0):
            gx = ndimage.gaussian_filter(gray, sigma, order=(0, 1))
            gy = ndimage.gaussian_filter(gray, sigma, order=(1, 0))
            grad_stack += [gx, gy, np.hypot(gx, gy)]
        shallow = np.stack(
            [_resize_bilinear(ch, (d, d)) for ch in grad_stack], axis=-1
        )
        shallow = shallow @ self._mix_shallow

        low_stack = []
        for sigma in (2.0, 4.0):
            for c in range(3):
                low_stack.append(ndimage.gaussian_filter(image[:, :, c], sigma))
        low_stack.append(ndimage.gaussian_filter(gray, 8.0))
        embed = np.stack([_resize_bilinear(ch, (d, d)) for ch in low_stack], axis=-1)
        embed = embed @ self._mix_embed

        masks = self._prompt_masks(gray)
        grad_mag = grad_stack[2]  # sigma=1 magnitude
        smooth = ndimage.gaussian_filter(gray, 2.0)
        dm = cfg.mask_embed_size
        gray_small = _resize_bilinear(smooth, (dm, dm))
        grad_small = _resize_bilinear(grad_mag, (dm, dm))
        embeds = []
        for m in masks:
            m_small = _resize_bilinear(m.astype(np.float64), (dm, dm))
            base = np.stack(
                [m_small, gray_small, grad_small, np.ones((dm, dm))], axis=-1
            )
            embeds.append(base @ self._mix_mask)
        mask_embeddings = np.stack(embeds, axis=0)

        return FeatureBundle(
            shallow_features=shallow,
            image_embedding=embed,
            mask_embeddings=mask_embeddings,
            object_masks=masks,
            source_size=(h, w),
        ).validate()

    def _prompt_masks(self, gray: np.ndarray) -> list[np.ndarray]:
        h, w = gray.shape
        g = self.cfg.grid_side
        smooth = ndimage.gaussian_filter(gray, 2.0)
        masks = []
        for i in range(g):
            for j in range(g):
                r = int((i + 0.5) * h / g)
                c = int((j + 0.5) * w / g)
                similar = np.abs(smooth - smooth[r, c]) < self.cfg.region_tau
                labels, _ = ndimage.label(similar)
                masks.append((labels == labels[r, c]).astype(np.uint8))
        return masks


class PretrainedAdapter:
    """Adapter contract around an external segmentation foundation model.

    The adapter wraps a third-party pretrained model package plus its
    checkpoint file and exposes the same ``extract`` contract as the toy
    backbone. The integration contract an implementation must honor:

    * prompt with the fixed ``grid_side x grid_side`` point grid, one decoder
      run per prompt, keeping all ``grid_side**2`` masks (no deduplication);
    * ``shallow_features`` hook at the output of the encoder's first block;
      ``image_embedding`` at the encoder output;
    * ``mask_embeddings`` hook at the decoder's upscaling input, i.e. before
      the decoder's final upsampling — this choice is part of the contract;
    * the wrapped model runs in eval mode with gradients disabled and exposes
      no learnable parameters to callers (access may serialize on one
      accelerator context; callers get reentrancy, not parallel speedup).

    Construction fails with an explicit load error until a concrete
    integration (model package + compatible checkpoint) is wired in.
    """

    def __init__(self, cfg: ProviderConfig):
        if cfg.checkpoint_path is None:
            raise ProviderLoadError("pretrained adapter requires checkpoint_path")
        if not os.path.exists(cfg.checkpoint_path):
            raise ProviderLoadError(f"checkpoint not found: {cfg.checkpoint_path}")
        try:
            import segment_anything  # noqa: F401
        except ImportError as exc:
            raise ProviderLoadError(
                "pretrained adapter needs the external segmentation model package; "
                "use the toy provider for checkpoint-free runs"
            ) from exc
        raise ProviderLoadError(  # pragma: no cover - needs the external package
            "no concrete integration is wired for this model package version; "
            "see the PretrainedAdapter contract docstring"
        )

    def extract(self, image: np.ndarray) -> FeatureBundle:  # pragma: no cover
        raise NotImplementedError


def make_provider(cfg: ProviderConfig):
    if cfg.provider_kind == "toy":
        return ToyBackbone(cfg)
    if cfg.provider_kind == "pretrained_adapter":
        return PretrainedAdapter(cfg)
    raise ConfigError(f"unknown provider kind: {cfg.provider_kind!r}")


def extract_features(image: np.ndarray, cfg: ProviderConfig) -> FeatureBundle:
    """One-shot extraction: build the provider for ``cfg`` and run it."""
    return make_provider(cfg).extract(image)


def sobel_edge(mask: np.ndarray) -> np.ndarray:
    """Binary edge of a binary mask: nonzero Sobel gradient magnitude.

    On binary inputs any nonzero response marks the boundary band, so no
    threshold is needed.
    """
    m = np.asarray(mask, dtype=np.float64)
    gx = ndimage.correlate(m, SOBEL_X, mode="reflect")
    gy = ndimage.correlate(m, SOBEL_Y, mode="reflect")
    return (np.hypot(gx, gy) > 0).astype(np.uint8)


def masks_to_guidance(
    masks: list[np.ndarray], shape: tuple[int, int] | None = None
) -> MaskGuidance:
    """Union of per-mask Sobel edges plus the per-pixel edge frequency.

    Frequency is normalized by the total mask count, so it stays in [0, 1].
    An empty mask list yields all-zero guidance (``shape`` must then be given).
    """
    if not masks:
        if shape is None:
            raise DimensionError("empty mask list needs an explicit shape")
        zero = np.zeros(shape)
        return MaskGuidance(zero.astype(np.uint8), zero, 0)
    base = masks[0].shape
    for m in masks:
        if m.shape != base:
            raise DimensionError(f"mask shape {m.shape} != {base}")
    edges = np.stack([sobel_edge(m) for m in masks], axis=0).astype(np.float64)
    union = (edges.max(axis=0) > 0).astype(np.uint8)
    freq = edges.mean(axis=0)
    return MaskGuidance(union, freq, len(masks))


# ---------------------------------------------------------------------------
# Feature cache: one binary record per image, versioned header followed by
# named little-endian float32 arrays, each with a shape prologue.

_CACHE_MAGIC = b"MGFB"
_CACHE_VERSION = 1


def _write_array(fh, name: str, arr: np.ndarray) -> None:
    payload = np.ascontiguousarray(arr, dtype="<f4")
    raw = name.encode("utf-8")
    fh.write(struct.pack("<H", len(raw)))
    fh.write(raw)
    fh.write(struct.pack("<B", payload.ndim))
    fh.write(struct.pack(f"<{payload.ndim}I", *payload.shape))
    fh.write(payload.tobytes())


def _read_array(fh) -> tuple[str, np.ndarray]:
    (name_len,) = struct.unpack("<H", fh.read(2))
    name = fh.read(name_len).decode("utf-8")
    (ndim,) = struct.unpack("<B", fh.read(1))
    shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
    count = int(np.prod(shape)) if shape else 1
    arr = np.frombuffer(fh.read(4 * count), dtype="<f4").reshape(shape)
    return name, arr.astype(np.float64)


def save_bundle(path: str, bundle: FeatureBundle) -> None:
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(_CACHE_MAGIC)
        fh.write(struct.pack("<H", _CACHE_VERSION))
        arrays = {
            "shallow_features": bundle.shallow_features,
            "image_embedding": bundle.image_embedding,
            "mask_embeddings": bundle.mask_embeddings,
            "object_masks": np.stack(bundle.object_masks, axis=0),
            "source_size": np.asarray(bundle.source_size, dtype=np.float64),
        }
        fh.write(struct.pack("<H", len(arrays)))
        for name, arr in arrays.items():
            _write_array(fh, name, arr)
    os.replace(tmp, path)  # atomic single-writer creation


def load_bundle(path: str) -> FeatureBundle:
    with open(path, "rb") as fh:
        if fh.read(4) != _CACHE_MAGIC:
            raise ValueError(f"not a feature cache record: {path}")
        (version,) = struct.unpack("<H", fh.read(2))
        if version != _CACHE_VERSION:
            raise ValueError(f"unsupported cache version {version}")
        (count,) = struct.unpack("<H", fh.read(2))
        arrays = dict(_read_array(fh) for _ in range(count))
    masks = [m.astype(np.uint8) for m in arrays["object_masks"]]
    h, w = (int(v) for v in arrays["source_size"])
    return FeatureBundle(
        shallow_features=arrays["shallow_features"],
        image_embedding=arrays["image_embedding"],
        mask_embeddings=arrays["mask_embeddings"],
        object_masks=masks,
        source_size=(h, w),
    )


class FeatureCache:
    """Disk cache of FeatureBundles keyed by (image hash, provider fingerprint)."""

    def __init__(self, cache_dir: str):
        self.cache_dir = cache_dir
        os.makedirs(cache_dir, exist_ok=True)
        self.hits = 0
        self.misses = 0

    def key(self, image: np.ndarray, cfg: ProviderConfig) -> str:
        digest = hashlib.sha256()
        digest.update(np.ascontiguousarray(image, dtype="<f4").tobytes())
        digest.update(cfg.fingerprint().encode())
        return digest.hexdigest()

    def get_or_extract(self, image: np.ndarray, provider, cfg: ProviderConfig) -> FeatureBundle:
        path = os.path.join(self.cache_dir, self.key(image, cfg) + ".feat")
        if os.path.exists(path):
            self.hits += 1
            return load_bundle(path)
        self.misses += 1
        bundle = provider.extract(image)
        save_bundle(path, bundle)
        # read back so hit and miss paths yield bit-identical (float32) features
        return load_bundle(path)
