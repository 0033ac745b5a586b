"""Per-image edge probability maps at the three ladder levels plus the fused output."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError


@dataclass
class EdgeMapSet:
    """Network outputs for one image as (H, W) probability grids in [0, 1]."""

    coarse: np.ndarray
    medium: np.ndarray
    fine: np.ndarray
    fused: np.ndarray

    def __post_init__(self):
        base = self.coarse.shape
        for name in ("medium", "fine", "fused"):
            if getattr(self, name).shape != base:
                raise DimensionError(f"{name} map shape differs from coarse")
        for name in ("coarse", "medium", "fine", "fused"):
            arr = getattr(self, name)
            if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
                raise ValueError(f"{name} map values must lie in [0, 1]")

    @property
    def shape(self) -> tuple[int, int]:
        return self.coarse.shape
