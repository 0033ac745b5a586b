"""Training losses: class-balanced BCE, side supervision, pairwise diversity,
mask-guided fused-output loss, and their weighted total.

All losses are sums over pixels (not means), so they scale with image area.
Predictions are clamped to (eps, 1 - eps) before logs; label-derived masks are
constants and carry no gradient.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch

EPS = 1e-7
DiffPairs = (("coarse", "medium"), ("coarse", "fine"), ("medium", "fine"))


@dataclass
class LossBreakdown:
    l_side: float
    l_differ: float
    l_guide: float
    l_total: float

    def as_dict(self) -> dict[str, float]:
        return {
            "l_side": self.l_side,
            "l_differ": self.l_differ,
            "l_guide": self.l_guide,
            "l_total": self.l_total,
        }


def _as_target(t, like: torch.Tensor) -> torch.Tensor:
    out = torch.as_tensor(t, dtype=like.dtype, device=like.device)
    if out.shape != like.shape:
        raise ValueError(f"target shape {tuple(out.shape)} != prediction {tuple(like.shape)}")
    return out


def balance_weight(target: torch.Tensor) -> torch.Tensor:
    """Negative-pixel fraction of the target; 1 when the target has no positives."""
    total = target.numel()
    pos = target.sum()
    return (total - pos) / total


def _bce_terms(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Per-pixel class-balanced BCE terms (positive, to be summed)."""
    xi = balance_weight(target)
    p = pred.clamp(EPS, 1.0 - EPS)
    return -(xi * target * torch.log(p) + (1.0 - xi) * (1.0 - target) * torch.log(1.0 - p))


def balanced_bce(pred: torch.Tensor, target) -> torch.Tensor:
    """Class-balanced BCE summed over pixels.

    The balance weight is the negative-pixel fraction of the target, so sparse
    edge pixels are up-weighted relative to the abundant background.
    """
    target = _as_target(target, pred)
    return _bce_terms(pred, target).sum()


def side_loss(maps, ladder) -> torch.Tensor:
    """Supervision of the three side outputs by the matching ladder levels."""
    total = None
    for level in ("coarse", "medium", "fine"):
        term = balanced_bce(getattr(maps, level), getattr(ladder, level))
        total = term if total is None else total + term
    return total


def differ_loss(maps, ladder) -> torch.Tensor:
    """Pairwise diversity between side outputs where their labels disagree.

    For each pair of levels, accumulates -|p_i - p_k| on pixels whose ladder
    labels differ (XOR mask). Always non-positive; minimizing it pushes the
    predictions apart exactly where the pseudo labels disagree.
    """
    ref = maps.coarse
    total = ref.new_zeros(())
    for a, b in DiffPairs:
        ya = _as_target(getattr(ladder, a), ref)
        yb = _as_target(getattr(ladder, b), ref)
        xor = (ya != yb).to(ref.dtype).detach()
        diff = torch.abs(getattr(maps, a) - getattr(maps, b))
        total = total - (diff * xor).sum()
    return total


def guide_weights(
    consensus: torch.Tensor,
    soft_consensus: torch.Tensor,
    mask_edge: torch.Tensor,
    mask_frequency: torch.Tensor,
) -> torch.Tensor:
    """Per-pixel weights exp(psi + omega).

    psi damps pixels where the provider's mask edges contradict the consensus
    label, scaled by cross-mask agreement; omega = cos(soft consensus) raises
    the weight of low-confidence edge pixels.
    """
    xor = (mask_edge != consensus).to(soft_consensus.dtype)
    psi = -mask_edge * xor * mask_frequency
    omega = torch.cos(soft_consensus)
    return torch.exp(psi + omega)


def guide_loss(pred_fused: torch.Tensor, consensus, soft_consensus, guidance) -> torch.Tensor:
    """Mask-guided balanced BCE for the fused output.

    The per-pixel BCE terms of the consensus supervision are re-weighted
    inside the sum by exp(psi + omega); with constant weights this reduces to
    a plain scaled balanced BCE.
    """
    consensus = _as_target(consensus, pred_fused)
    soft = _as_target(soft_consensus, pred_fused)
    mask_edge = _as_target(guidance.edge_union, pred_fused)
    mask_freq = _as_target(guidance.edge_frequency, pred_fused)
    w = guide_weights(consensus, soft, mask_edge, mask_freq).detach()
    return (w * _bce_terms(pred_fused, consensus)).sum()


def total_loss(
    l_guide: torch.Tensor,
    l_differ: torch.Tensor,
    l_side: torch.Tensor,
    lam: float = 0.1,
    beta: float = 0.5,
) -> tuple[torch.Tensor, LossBreakdown]:
    """Weighted total l_guide + lam * l_differ + beta * l_side."""
    if lam < 0 or beta < 0:
        raise ValueError("loss coefficients must be non-negative")
    total = l_guide + lam * l_differ + beta * l_side
    breakdown = LossBreakdown(
        l_side=float(l_side.detach()),
        l_differ=float(l_differ.detach()),
        l_guide=float(l_guide.detach()),
        l_total=float(total.detach()),
    )
    return total, breakdown
