"""Training loop, checkpointing, inference, and ablation switches.

Training is deterministic for a fixed seed in single-worker mode: sample
order, augmentation draws, and consensus resampling all derive from content
hashes of (seed, epoch, sample id), and checkpoints capture model weights,
optimizer moments, and counters exactly (float32), so a resumed run continues
the uninterrupted trace.
"""
from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import asdict, dataclass, field
from types import SimpleNamespace

import numpy as np
import torch

from . import losses as L
from .backbone import FeatureCache, ProviderConfig, make_provider
from .data import (
    AugmentConfig,
    ConsensusConfig,
    Sample,
    augment,
    load_manifest,
    load_samples,
    prepare_batch,
    stable_rng,
)
from .errors import CheckpointError, InputError, TrainingDiverged
from .granularity import blend, candidate_sweep
from .maps import EdgeMapSet
from .stn import (
    SideTransferNetwork,
    StnConfig,
    TensorBundle,
    model_tensors,
    read_container,
    write_container,
)


@dataclass
class AblationSwitches:
    soc_off: bool = False  # drop side/diversity supervision; fused output only
    guide_off: bool = False  # plain balanced BCE instead of mask-guided loss
    differ_off: bool = False  # diversity coefficient forced to zero


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    weight_decay: float = 5e-4
    epochs: int = 6
    lr_decay_epoch: int = 4  # decay kicks in at this 0-indexed epoch
    lr_decay_factor: float = 0.1
    batch_size: int = 3
    lam: float = 0.1
    beta: float = 0.5
    zeta: float = 0.2
    seed: int = 0
    grad_clip: float = 1.0
    provider: ProviderConfig = field(default_factory=ProviderConfig)
    stn: StnConfig | None = None
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    cache_dir: str | None = None

    def __post_init__(self):
        if self.lam < 0 or self.beta < 0:
            raise ValueError("loss coefficients must be non-negative")
        for name in ("learning_rate", "weight_decay", "epochs", "batch_size"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    def resolved_stn(self) -> StnConfig:
        if self.stn is not None:
            return self.stn
        return StnConfig.from_provider(self.provider)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["provider"] = asdict(self.provider)
        out["stn"] = asdict(self.resolved_stn())
        out["augment"] = asdict(self.augment)
        return out

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


@dataclass
class TrainResult:
    checkpoint_path: str
    log: list[dict]
    model: SideTransferNetwork


def effective_cache_dir(cfg: TrainConfig) -> str | None:
    return cfg.cache_dir or os.environ.get("MGEDGE_CACHE_DIR")


def _image_view(outputs, i: int) -> SimpleNamespace:
    return SimpleNamespace(
        coarse=outputs.coarse[i],
        medium=outputs.medium[i],
        fine=outputs.fine[i],
        fused=outputs.fused[i],
    )


def _batch_losses(outputs, batch, cfg: TrainConfig, switches: AblationSwitches):
    zero = outputs.fused.new_zeros(())
    l_side, l_differ, l_guide = zero, zero, zero
    for i, rec in enumerate(batch):
        view = _image_view(outputs, i)
        if not switches.soc_off:
            l_side = l_side + L.side_loss(view, rec.ladder)
            l_differ = l_differ + L.differ_loss(view, rec.ladder)
        if switches.guide_off:
            l_guide = l_guide + L.balanced_bce(view.fused, rec.ladder.consensus)
        else:
            l_guide = l_guide + L.guide_loss(
                view.fused, rec.ladder.consensus, rec.ladder.soft_consensus, rec.guidance
            )
    lam = 0.0 if switches.differ_off else cfg.lam
    return L.total_loss(l_guide, l_differ, l_side, lam=lam, beta=cfg.beta)


# ---------------------------------------------------------------------------
# Checkpoints: model weights + optimizer moments + counters in one container.


def save_checkpoint(
    path: str,
    model: SideTransferNetwork,
    optimizer: torch.optim.Adam | None,
    cfg: TrainConfig,
    epoch: int,
    step: int,
    switches: AblationSwitches,
) -> None:
    tensors = model_tensors(model)
    has_opt = False
    if optimizer is not None:
        for name, param in model.named_parameters():
            state = optimizer.state.get(param)
            if not state:
                continue
            has_opt = True
            tensors[f"opt.step.{name}"] = state["step"].detach().cpu().numpy()
            tensors[f"opt.exp_avg.{name}"] = state["exp_avg"].detach().cpu().numpy()
            tensors[f"opt.exp_avg_sq.{name}"] = state["exp_avg_sq"].detach().cpu().numpy()
    meta = {
        "stn_config": asdict(model.cfg),
        "provider_config": asdict(cfg.provider),
        "train_config": cfg.to_dict(),
        "config_hash": cfg.config_hash(),
        "epoch": epoch,
        "step": step,
        "has_optimizer": has_opt,
        "granularity_outputs": not switches.soc_off,
        "switches": asdict(switches),
    }
    write_container(path, meta, tensors)


def _load_into(model: SideTransferNetwork, optimizer: torch.optim.Adam, path: str) -> dict:
    meta, tensors = read_container(path)
    weights = {k: torch.from_numpy(v.copy()) for k, v in tensors.items() if not k.startswith("opt.")}
    model.load_state_dict(weights)
    if meta.get("has_optimizer"):
        for name, param in model.named_parameters():
            step_key = f"opt.step.{name}"
            if step_key not in tensors:
                raise CheckpointError(f"optimizer state missing for {name}")
            optimizer.state[param] = {
                "step": torch.from_numpy(tensors[step_key].copy()),
                "exp_avg": torch.from_numpy(tensors[f"opt.exp_avg.{name}"].copy()),
                "exp_avg_sq": torch.from_numpy(tensors[f"opt.exp_avg_sq.{name}"].copy()),
            }
    return meta


# ---------------------------------------------------------------------------
# Training


def run_training(
    cfg: TrainConfig,
    manifest_path: str,
    out_dir: str,
    switches: AblationSwitches | None = None,
    resume: str | None = None,
    log_every: int = 0,
) -> TrainResult:
    switches = switches or AblationSwitches()
    os.makedirs(out_dir, exist_ok=True)
    manifest = load_manifest(manifest_path)
    base_samples = load_samples(manifest)

    torch.manual_seed(cfg.seed)
    model = SideTransferNetwork(cfg.resolved_stn())
    optimizer = torch.optim.Adam(
        model.parameters(), lr=cfg.learning_rate, weight_decay=cfg.weight_decay
    )
    provider = make_provider(cfg.provider)
    cache_dir = effective_cache_dir(cfg)
    cache = FeatureCache(cache_dir) if cache_dir else None

    start_epoch, global_step = 0, 0
    if resume is not None:
        meta = _load_into(model, optimizer, resume)
        if meta.get("config_hash") != cfg.config_hash():
            raise CheckpointError("resume config differs from checkpoint config")
        start_epoch = meta["epoch"] + 1
        global_step = meta["step"]

    log_path = os.path.join(out_dir, "train_log.jsonl")
    log: list[dict] = []
    log_fh = open(log_path, "a" if resume else "w")

    last_good = os.path.join(out_dir, "init.ckpt")
    save_checkpoint(last_good, model, optimizer, cfg, start_epoch - 1, global_step, switches)
    final_path = os.path.join(out_dir, "latest.ckpt")

    try:
        for epoch in range(start_epoch, cfg.epochs):
            lr = cfg.learning_rate * (
                cfg.lr_decay_factor if epoch >= cfg.lr_decay_epoch else 1.0
            )
            for group in optimizer.param_groups:
                group["lr"] = lr

            order = stable_rng(cfg.seed, "order", epoch).permutation(len(base_samples))
            epoch_samples = [
                augment(
                    base_samples[i],
                    stable_rng(cfg.seed, "augment", epoch, base_samples[i].sample_id),
                    cfg.augment,
                )
                for i in order
            ]
            batches = prepare_batch(
                epoch_samples,
                provider,
                cfg.provider,
                ConsensusConfig(zeta=cfg.zeta, seed=cfg.seed, epoch=epoch),
                batch_size=cfg.batch_size,
                cache=cache,
            )

            for batch in batches:
                tb = TensorBundle.from_bundles([r.bundle for r in batch])
                outputs = model(tb, batch[0].image.shape[:2])
                total, breakdown = _batch_losses(outputs, batch, cfg, switches)
                if not math.isfinite(breakdown.l_total):
                    raise TrainingDiverged(
                        f"non-finite loss at step {global_step}: {breakdown.as_dict()}",
                        last_checkpoint=last_good,
                    )
                optimizer.zero_grad(set_to_none=True)
                total.backward()
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
                optimizer.step()

                record = {"step": global_step, "epoch": epoch, "lr": lr}
                record.update(breakdown.as_dict())
                log.append(record)
                log_fh.write(json.dumps(record) + "\n")
                if log_every and global_step % log_every == 0:
                    print(
                        f"step {global_step} epoch {epoch} "
                        f"l_total {breakdown.l_total:.4f} lr {lr:g}"
                    )
                global_step += 1

            epoch_path = os.path.join(out_dir, f"epoch_{epoch:03d}.ckpt")
            save_checkpoint(epoch_path, model, optimizer, cfg, epoch, global_step, switches)
            last_good = epoch_path
    finally:
        log_fh.close()

    save_checkpoint(final_path, model, optimizer, cfg, cfg.epochs - 1, global_step, switches)
    return TrainResult(checkpoint_path=final_path, log=log, model=model)


def ablate(
    cfg: TrainConfig, switches: AblationSwitches, manifest_path: str, out_dir: str
) -> TrainResult:
    """Train with components disabled; equivalent to ``run_training`` with switches."""
    return run_training(cfg, manifest_path, out_dir, switches=switches)


# ---------------------------------------------------------------------------
# Inference


def load_for_inference(checkpoint_path: str):
    from .stn import load_model

    model, meta = load_model(checkpoint_path)
    model.eval()
    pcfg = ProviderConfig(**meta["provider_config"])
    provider = make_provider(pcfg)
    return model, provider, meta


def infer_maps(model: SideTransferNetwork, provider, image: np.ndarray) -> EdgeMapSet:
    bundle = provider.extract(image)
    tb = TensorBundle.from_bundles([bundle])
    with torch.no_grad():
        outputs = model(tb, image.shape[:2])
    return outputs.edge_maps(0)


def infer(
    checkpoint_path: str,
    image: np.ndarray,
    alpha: float | None = None,
    m: int | None = None,
):
    """Run the detector on one image.

    With neither ``alpha`` nor ``m``, returns the fused output; ``alpha``
    returns one blended map; ``m`` returns the granularity sweep. Granularity
    requests against a fused-only (soc_off) checkpoint are rejected.
    """
    if alpha is not None and m is not None:
        raise InputError("give at most one of alpha and m")
    model, provider, meta = load_for_inference(checkpoint_path)
    maps = infer_maps(model, provider, image)
    if alpha is None and m is None:
        return maps.fused
    if not meta.get("granularity_outputs", True):
        raise InputError(
            "checkpoint was trained without granularity supervision; "
            "blended outputs are unavailable"
        )
    if alpha is not None:
        return blend(maps, alpha)
    return candidate_sweep(maps, m)
