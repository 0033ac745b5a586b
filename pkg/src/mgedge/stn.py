"""Side transfer network: projects frozen-backbone features into edge-aware
grids, fuses them through two cross-attention fuse blocks, and emits three
granularity side outputs plus the fused output through one shared head.

Dataflow contract (asserted by tests via zero-gradient probes): the coarse
output sees only the image embedding; the medium output additionally sees the
shallow features; fine and fused outputs see all three feature sources.

A model instance is single-execution-context for forward/backward; read-only
inference with frozen weights may run concurrently.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from einops import rearrange

from .backbone import FeatureBundle, ProviderConfig
from .errors import CheckpointError, ConfigError, DimensionError
from .maps import EdgeMapSet


@dataclass
class StnConfig:
    """Architecture knobs; defaults target a sub-2M trainable budget over a
    large frozen provider (shallow 768, embedding 256, mask 32 channels)."""

    shallow_channels: int = 768
    embed_channels: int = 256
    mask_channels: int = 32
    n_prompts: int = 64
    proj_channels: int = 64  # C1: edge-aware feature width
    mask_proj_channels: int = 2  # C2: per-prompt channels after rescale
    head_channels: int = 32  # width of granularity head-space features
    attn_heads: int = 4
    ffb_depth: int = 2
    ffn_expansion: float = 2.66
    head_factors: tuple[int, int] = (4, 4)
    head_mid_channels: int = 32

    def __post_init__(self):
        if isinstance(self.head_factors, list):
            self.head_factors = tuple(self.head_factors)
        if self.proj_channels % self.attn_heads != 0:
            raise ConfigError("proj_channels must be divisible by attn_heads")

    @classmethod
    def from_provider(cls, pcfg: ProviderConfig, **overrides) -> "StnConfig":
        base = dict(
            shallow_channels=pcfg.shallow_channels,
            embed_channels=pcfg.embed_channels,
            mask_channels=pcfg.mask_channels,
            n_prompts=pcfg.n_prompts,
        )
        base.update(overrides)
        return cls(**base)


@dataclass
class TensorBundle:
    """Batched channels-first tensors: shallow/embed (B, C, D, D), mask (B, n, C_m, d, d)."""

    shallow: torch.Tensor
    embed: torch.Tensor
    mask: torch.Tensor

    @classmethod
    def from_bundles(
        cls, bundles: list[FeatureBundle], dtype=torch.float32, device="cpu"
    ) -> "TensorBundle":
        def grid(arrs):  # (H, W, C) -> (C, H, W)
            return torch.stack(
                [torch.as_tensor(a, dtype=dtype, device=device).permute(2, 0, 1) for a in arrs]
            )

        shallow = grid([b.shallow_features for b in bundles])
        embed = grid([b.image_embedding for b in bundles])
        mask = torch.stack(
            [
                torch.as_tensor(b.mask_embeddings, dtype=dtype, device=device).permute(0, 3, 1, 2)
                for b in bundles
            ]
        )
        return cls(shallow=shallow, embed=embed, mask=mask)


@dataclass
class SideOutputs:
    """Batched sigmoid outputs, each (B, H, W) in [0, 1]."""

    coarse: torch.Tensor
    medium: torch.Tensor
    fine: torch.Tensor
    fused: torch.Tensor

    def edge_maps(self, index: int = 0) -> EdgeMapSet:
        def np_map(t: torch.Tensor) -> np.ndarray:
            return t[index].detach().cpu().numpy().astype(np.float64)

        return EdgeMapSet(
            coarse=np_map(self.coarse),
            medium=np_map(self.medium),
            fine=np_map(self.fine),
            fused=np_map(self.fused),
        )


class BiasFreeLayerNorm(nn.Module):
    """Channel-wise LayerNorm without bias; maps zero inputs to zero."""

    def __init__(self, channels: int):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(channels))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        var = x.var(dim=1, keepdim=True, unbiased=False)
        return x / torch.sqrt(var + 1e-6) * self.weight.view(1, -1, 1, 1)


class CrossAttention(nn.Module):
    """Spatial-token cross attention: query from x, key/value from context.

    No positional encoding is added, so the output is invariant to
    permutations of the context's spatial positions.
    """

    def __init__(self, dim: int, ctx_dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.q = nn.Conv2d(dim, dim, 1, bias=False)
        self.k = nn.Conv2d(ctx_dim, dim, 1, bias=False)
        self.v = nn.Conv2d(ctx_dim, dim, 1, bias=False)
        self.out = nn.Conv2d(dim, dim, 1, bias=False)

    def forward(self, x: torch.Tensor, ctx: torch.Tensor) -> torch.Tensor:
        h, w = x.shape[-2:]
        q = rearrange(self.q(x), "b (hd c) y x -> b hd (y x) c", hd=self.heads)
        k = rearrange(self.k(ctx), "b (hd c) y x -> b hd (y x) c", hd=self.heads)
        v = rearrange(self.v(ctx), "b (hd c) y x -> b hd (y x) c", hd=self.heads)
        attn = torch.softmax(q @ k.transpose(-2, -1) / np.sqrt(q.shape[-1]), dim=-1)
        out = rearrange(attn @ v, "b hd (y x) c -> b (hd c) y x", y=h, x=w)
        return self.out(out)


class GatedFeedForward(nn.Module):
    """Gated depthwise-conv feed-forward; output projection starts at zero so
    a fresh block is an identity through its residual."""

    def __init__(self, dim: int, expansion: float):
        super().__init__()
        hidden = int(dim * expansion)
        self.project_in = nn.Conv2d(dim, hidden * 2, 1, bias=False)
        self.dwconv = nn.Conv2d(hidden * 2, hidden * 2, 3, padding=1, groups=hidden * 2, bias=False)
        self.project_out = nn.Conv2d(hidden, dim, 1, bias=False)
        nn.init.zeros_(self.project_out.weight)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        gate, value = self.dwconv(self.project_in(x)).chunk(2, dim=1)
        return self.project_out(F.gelu(gate) * value)


class FuseBlock(nn.Module):
    def __init__(self, dim: int, ctx_dim: int, heads: int, expansion: float):
        super().__init__()
        self.norm_q = BiasFreeLayerNorm(dim)
        self.norm_ctx = BiasFreeLayerNorm(ctx_dim)
        self.attn = CrossAttention(dim, ctx_dim, heads)
        self.norm_ffn = BiasFreeLayerNorm(dim)
        self.ffn = GatedFeedForward(dim, expansion)

    def forward(self, x: torch.Tensor, ctx: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.norm_q(x), self.norm_ctx(ctx))
        return x + self.ffn(self.norm_ffn(x))


class FeatureFuseBlock(nn.Module):
    """Stack of cross-attention + gated feed-forward blocks.

    Residual connections preserve the query's shape for any context width.
    """

    def __init__(self, dim: int, ctx_dim: int, heads: int, depth: int, expansion: float):
        super().__init__()
        self.blocks = nn.ModuleList(
            FuseBlock(dim, ctx_dim, heads, expansion) for _ in range(depth)
        )

    def forward(self, x: torch.Tensor, ctx: torch.Tensor) -> torch.Tensor:
        if x.shape[-2:] != ctx.shape[-2:]:
            raise DimensionError("query and context spatial sizes differ")
        for block in self.blocks:
            x = block(x, ctx)
        return x


class SharedHead(nn.Module):
    """Single classification head shared by all four outputs: two
    upsample-conv stages, a 1-channel projection, resize to target, sigmoid."""

    def __init__(self, in_channels: int, mid_channels: int, factors: tuple[int, int]):
        super().__init__()
        stages = []
        ch = in_channels
        for f in factors:
            if f > 1:
                stages.append(nn.Upsample(scale_factor=f, mode="bilinear", align_corners=False))
            stages.append(nn.Conv2d(ch, mid_channels, 3, padding=1))
            stages.append(nn.GELU())
            ch = mid_channels
        self.stages = nn.Sequential(*stages)
        self.final = nn.Conv2d(mid_channels, 1, 1)

    def forward(self, feat: torch.Tensor, target_size: tuple[int, int]) -> torch.Tensor:
        x = self.final(self.stages(feat))
        if x.shape[-2:] != tuple(target_size):
            x = F.interpolate(x, size=target_size, mode="bilinear", align_corners=False)
        return torch.sigmoid(x).squeeze(1)


def _gate_conv(in_ch: int, out_ch: int) -> nn.Conv2d:
    # identity gating at init: zero weight, unit bias
    conv = nn.Conv2d(in_ch, out_ch, 1)
    nn.init.zeros_(conv.weight)
    nn.init.ones_(conv.bias)
    return conv


class SideTransferNetwork(nn.Module):
    def __init__(self, cfg: StnConfig):
        super().__init__()
        self.cfg = cfg
        c1, c2, ch = cfg.proj_channels, cfg.mask_proj_channels, cfg.head_channels

        self.proj_embed = nn.Conv2d(cfg.embed_channels, c1, 3, padding=1)
        self.proj_shallow = nn.Conv2d(cfg.shallow_channels, c1, 3, padding=1)
        self.proj_mask = nn.Conv2d(cfg.mask_channels, c2, 1)

        self.to_coarse = nn.Conv2d(c1, ch, 3, padding=1)
        self.gate_coarse = _gate_conv(ch, c1)
        self.ffb_shallow = FeatureFuseBlock(
            c1, c1, cfg.attn_heads, cfg.ffb_depth, cfg.ffn_expansion
        )
        self.to_medium = nn.Conv2d(c1, ch, 3, padding=1)
        self.gate_medium = _gate_conv(ch, c1)
        self.ffb_mask = FeatureFuseBlock(
            c1, c2 * cfg.n_prompts, cfg.attn_heads, cfg.ffb_depth, cfg.ffn_expansion
        )
        self.to_fine = nn.Conv2d(c1, ch, 3, padding=1)

        self.mix_medium = nn.Conv2d(2 * ch, ch, 1)
        self.mix_fine = nn.Conv2d(2 * ch, ch, 1)
        self.mix_fused = nn.Conv2d(3 * ch, ch, 1)
        self.head = SharedHead(ch, cfg.head_mid_channels, cfg.head_factors)

    # -- stages ------------------------------------------------------------

    def project(self, tb: TensorBundle) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """Edge-aware projections of the three frozen feature sources.

        Mask embeddings are rescaled per prompt to C2 channels, resampled to
        the working resolution, and concatenated prompt-wise along channels so
        every prompt's detail stays addressable.
        """
        if tb.shallow.shape[1] != self.cfg.shallow_channels:
            raise ConfigError(
                f"shallow channels {tb.shallow.shape[1]} != configured {self.cfg.shallow_channels}"
            )
        if tb.embed.shape[1] != self.cfg.embed_channels:
            raise ConfigError(
                f"embedding channels {tb.embed.shape[1]} != configured {self.cfg.embed_channels}"
            )
        if tb.mask.shape[2] != self.cfg.mask_channels:
            raise ConfigError(
                f"mask channels {tb.mask.shape[2]} != configured {self.cfg.mask_channels}"
            )
        embed_e = self.proj_embed(tb.embed)
        shallow_e = self.proj_shallow(tb.shallow)

        b, n, cm, dm, _ = tb.mask.shape
        flat = tb.mask.reshape(b * n, cm, dm, dm)
        flat = self.proj_mask(flat)
        d = embed_e.shape[-1]
        if flat.shape[-2:] != (d, d):
            flat = F.interpolate(flat, size=(d, d), mode="bilinear", align_corners=False)
        mask_e = flat.reshape(b, n * self.cfg.mask_proj_channels, d, d)
        return shallow_e, embed_e, mask_e

    def cascade(
        self, shallow_e: torch.Tensor, embed_e: torch.Tensor, mask_e: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """Coarse-to-fine feature construction with gated fusion.

        The gate convolutions feed each level's head-space feature back as an
        element-wise modulation of the next fusion's query.
        """
        f_coarse = self.to_coarse(embed_e)
        fused_m = self.ffb_shallow(embed_e * self.gate_coarse(f_coarse), shallow_e)
        f_medium = self.to_medium(fused_m)
        gated = fused_m * self.gate_medium(f_medium)
        fused_f = self.ffb_mask(gated, mask_e)
        f_fine = self.to_fine(fused_f)
        return f_coarse, f_medium, f_fine

    def heads(
        self,
        f_coarse: torch.Tensor,
        f_medium: torch.Tensor,
        f_fine: torch.Tensor,
        target_size: tuple[int, int],
    ) -> SideOutputs:
        y_coarse = self.head(f_coarse, target_size)
        m2 = self.mix_medium(torch.cat([f_medium, f_coarse], dim=1))
        y_medium = self.head(m2, target_size)
        f2 = self.mix_fine(torch.cat([f_fine, m2], dim=1))
        y_fine = self.head(f2, target_size)
        y_fused = self.head(self.mix_fused(torch.cat([f_coarse, m2, f2], dim=1)), target_size)
        return SideOutputs(coarse=y_coarse, medium=y_medium, fine=y_fine, fused=y_fused)

    def forward(self, tb: TensorBundle, target_size: tuple[int, int]) -> SideOutputs:
        shallow_e, embed_e, mask_e = self.project(tb)
        f_c, f_m, f_f = self.cascade(shallow_e, embed_e, mask_e)
        return self.heads(f_c, f_m, f_f, target_size)


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


# ---------------------------------------------------------------------------
# Checkpoint container: versioned header, JSON metadata, then named float32
# little-endian tensors each with a shape prologue. Loading validates every
# name and shape against the architecture rebuilt from the stored config.

_CKPT_MAGIC = b"MGCK"
_CKPT_VERSION = 1


def write_container(path: str, meta: dict, tensors: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<H", _CKPT_VERSION))
        blob = json.dumps(meta, sort_keys=True).encode("utf-8")
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(tensors)))
        for name in sorted(tensors):
            arr = np.ascontiguousarray(tensors[name], dtype="<f4")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def read_container(path: str) -> tuple[dict, dict[str, np.ndarray]]:
    try:
        fh = open(path, "rb")
    except OSError as exc:
        raise CheckpointError(f"cannot open checkpoint: {path}") from exc
    with fh:
        if fh.read(4) != _CKPT_MAGIC:
            raise CheckpointError(f"not a checkpoint container: {path}")
        (version,) = struct.unpack("<H", fh.read(2))
        if version != _CKPT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        (meta_len,) = struct.unpack("<I", fh.read(4))
        meta = json.loads(fh.read(meta_len).decode("utf-8"))
        (count,) = struct.unpack("<I", fh.read(4))
        tensors = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", fh.read(2))
            name = fh.read(name_len).decode("utf-8")
            (ndim,) = struct.unpack("<B", fh.read(1))
            shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
            n = int(np.prod(shape)) if shape else 1
            tensors[name] = np.frombuffer(fh.read(4 * n), dtype="<f4").reshape(shape)
    return meta, tensors


def model_tensors(model: SideTransferNetwork) -> dict[str, np.ndarray]:
    return {
        name: p.detach().cpu().numpy().astype("<f4")
        for name, p in model.state_dict().items()
    }


def save_model(path: str, model: SideTransferNetwork, extra_meta: dict | None = None) -> None:
    meta = {"stn_config": asdict(model.cfg)}
    if extra_meta:
        meta.update(extra_meta)
    write_container(path, meta, model_tensors(model))


def load_model(path: str) -> tuple[SideTransferNetwork, dict]:
    """Rebuild the model from a checkpoint, validating every tensor name/shape.

    Training checkpoints carry optimizer moments alongside the weights; those
    ``opt.*`` entries are ignored here.
    """
    meta, tensors = read_container(path)
    tensors = {k: v for k, v in tensors.items() if not k.startswith("opt.")}
    if "stn_config" not in meta:
        raise CheckpointError("checkpoint is missing the architecture config")
    cfg = StnConfig(**meta["stn_config"])
    model = SideTransferNetwork(cfg)
    expected = {name: tuple(p.shape) for name, p in model.state_dict().items()}
    got = {name: tuple(arr.shape) for name, arr in tensors.items()}
    if expected.keys() != got.keys():
        missing = sorted(expected.keys() - got.keys())
        extra = sorted(got.keys() - expected.keys())
        raise CheckpointError(f"tensor names mismatch: missing={missing}, unexpected={extra}")
    for name, shape in expected.items():
        if got[name] != shape:
            raise CheckpointError(f"shape mismatch for {name}: {got[name]} != {shape}")
    state = {name: torch.from_numpy(arr.copy()) for name, arr in tensors.items()}
    model.load_state_dict(state)
    return model, meta
