"""Granularity ladder, consensus sampling, and arbitrary-granularity blending.

Everything here is a pure function of its inputs plus an explicit seeded
random stream; concurrent callers must hold independent streams.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError, InputError
from .maps import EdgeMapSet


@dataclass
class AnnotationSet:
    """Binary edge annotations for one image, one grid per annotator."""

    labels: list[np.ndarray]

    def __post_init__(self):
        if len(self.labels) == 0:
            raise InputError("annotation set needs at least one label")
        base = self.labels[0].shape
        for lab in self.labels:
            if lab.shape != base:
                raise DimensionError(f"annotation shape {lab.shape} != {base}")
            vals = np.unique(lab)
            if not np.all(np.isin(vals, (0, 1))):
                raise InputError("annotations must be binary")

    @property
    def n(self) -> int:
        return len(self.labels)

    @property
    def shape(self) -> tuple[int, int]:
        return self.labels[0].shape


@dataclass
class LabelLadder:
    """Nested pseudo labels plus the sampled consensus target.

    ``coarse <= medium <= fine`` pointwise by construction. ``soft_consensus``
    is the clipped Gaussian sample in [0, 1]; ``consensus`` is its
    binarization at ``zeta``. ``mu``/``sigma`` are the per-pixel population
    statistics of the annotator set.
    """

    coarse: np.ndarray
    medium: np.ndarray
    fine: np.ndarray
    consensus: np.ndarray
    soft_consensus: np.ndarray
    mu: np.ndarray
    sigma: np.ndarray
    zeta: float


def build_ladder(ann: AnnotationSet) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """OR-compose annotations sorted by ascending edge count into a nested ladder.

    The coarse level is the sparsest annotation; medium ORs in the
    middle-ranked one; fine ORs in the densest. Ties in the edge-count sort
    break by original annotator index (stable), keeping the result
    deterministic across runs.
    """
    counts = [int(lab.sum()) for lab in ann.labels]
    order = sorted(range(ann.n), key=lambda i: counts[i])
    ranked = [ann.labels[i].astype(np.uint8) for i in order]
    coarse = ranked[0].copy()
    mid_idx = int(np.ceil(ann.n / 2)) - 1
    medium = coarse | ranked[mid_idx]
    fine = medium | ranked[-1]
    return coarse, medium, fine


def sample_consensus(
    ann: AnnotationSet, zeta: float, rng: np.random.Generator | int
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Draw the consensus label from per-pixel Gaussians fit to the annotators.

    Returns (consensus, soft_consensus, mu, sigma). Samples are clipped to
    [0, 1] before thresholding at ``zeta``; a single annotator degenerates to
    sigma = 0 and the soft consensus equals mu.
    """
    if not 0.0 < zeta < 1.0:
        raise ConfigError(f"zeta must lie in (0, 1), got {zeta}")
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    stack = np.stack([lab.astype(np.float64) for lab in ann.labels], axis=0)
    mu = stack.mean(axis=0)
    sigma = stack.std(axis=0)  # population statistics (ddof=0)
    soft = np.clip(rng.normal(mu, sigma), 0.0, 1.0) if ann.n > 1 else mu.copy()
    hard = (soft > zeta).astype(np.uint8)
    return hard, soft, mu, sigma


def make_ladder(
    ann: AnnotationSet, zeta: float, rng: np.random.Generator | int
) -> LabelLadder:
    coarse, medium, fine = build_ladder(ann)
    hard, soft, mu, sigma = sample_consensus(ann, zeta, rng)
    return LabelLadder(coarse, medium, fine, hard, soft, mu, sigma, zeta)


def blend_levels(
    coarse: np.ndarray, medium: np.ndarray, fine: np.ndarray, alpha: float
) -> np.ndarray:
    """Piecewise-linear interpolation across the three granularity levels.

    alpha in [0, 0.5] walks coarse -> medium; (0.5, 1] walks medium -> fine.
    Endpoints reproduce the side maps exactly.
    """
    if not 0.0 <= alpha <= 1.0:
        raise InputError(f"alpha must lie in [0, 1], got {alpha}")
    if alpha <= 0.5:
        t = alpha / 0.5
        return t * medium + (1.0 - t) * coarse
    t = (alpha - 0.5) / 0.5
    return t * fine + (1.0 - t) * medium


def blend(maps: EdgeMapSet, alpha: float) -> np.ndarray:
    return blend_levels(maps.coarse, maps.medium, maps.fine, alpha)


def candidate_sweep(maps: EdgeMapSet, m: int) -> list[np.ndarray]:
    """Blend at m evenly spaced granularities alpha = k / (m - 1)."""
    if m < 2:
        raise InputError(f"candidate count must be >= 2, got {m}")
    return [blend(maps, k / (m - 1)) for k in range(m)]
