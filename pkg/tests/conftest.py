import numpy as np
import pytest
import torch

from mgedge.backbone import ProviderConfig
from mgedge.maps import EdgeMapSet
from mgedge.stn import StnConfig


def tiny_provider_cfg(seed: int = 3, **overrides) -> ProviderConfig:
    base = dict(
        provider_kind="toy",
        seed=seed,
        grid_side=2,
        feature_size=4,
        shallow_channels=4,
        embed_channels=4,
        mask_channels=3,
        mask_embed_size=4,
    )
    base.update(overrides)
    return ProviderConfig(**base)


def tiny_stn_cfg(pcfg: ProviderConfig | None = None, **overrides) -> StnConfig:
    pcfg = pcfg or tiny_provider_cfg()
    base = dict(
        proj_channels=4,
        mask_proj_channels=2,
        head_channels=4,
        attn_heads=2,
        ffb_depth=1,
        ffn_expansion=2.0,
        head_factors=(2, 2),
        head_mid_channels=4,
    )
    base.update(overrides)
    return StnConfig.from_provider(pcfg, **base)


def random_edge_maps(rng: np.random.Generator, shape=(6, 7)) -> EdgeMapSet:
    return EdgeMapSet(
        coarse=rng.random(shape),
        medium=rng.random(shape),
        fine=rng.random(shape),
        fused=rng.random(shape),
    )


def random_probability_grid(rng, shape, sparsity=0.7):
    grid = rng.random(shape)
    grid[rng.random(shape) < sparsity] = 0.0
    return grid


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)
    yield


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
