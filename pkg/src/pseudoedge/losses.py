"""Partial cross-entropy on point labels plus the edge-consistency term."""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .annotation import IGNORE, NEGATIVE, POSITIVE
from .ops import attention_gate, sobel

EPS = 1e-7


@dataclass(frozen=True)
class LossConfig:
    lam: float = 1.0
    weight_positive: float = 1.0
    weight_negative: float = 0.1
    use_attention: bool = False

    def __post_init__(self):
        if not self.lam >= 0:
            raise ValueError("lambda must be non-negative")
        if not (self.weight_positive > 0 and self.weight_negative > 0):
            raise ValueError("label weights must be positive")


@dataclass
class LossBreakdown:
    ce: torch.Tensor
    edge: torch.Tensor
    total: torch.Tensor

    def as_floats(self) -> dict:
        return {"ce": float(self.ce), "edge": float(self.edge), "total": float(self.total)}


def weighted_partial_ce(pred: torch.Tensor, labels: torch.Tensor, cfg: LossConfig = LossConfig()) -> torch.Tensor:
    """Weighted binary cross-entropy averaged over labelled pixels only.

    ``pred`` holds probabilities, ``labels`` the tri-state codes; both share
    the spatial shape (a channel axis of size 1 on ``pred`` is dropped).
    The denominator is the labelled-pixel count, not the weight sum.
    """
    if pred.dim() == labels.dim() + 1:
        pred = pred.squeeze(-3)
    if pred.shape != labels.shape:
        raise ValueError(f"shape mismatch: pred {tuple(pred.shape)} vs labels {tuple(labels.shape)}")
    labels = labels.to(pred.device)
    pos = labels == POSITIVE
    neg = labels == NEGATIVE
    n = int(pos.sum()) + int(neg.sum())
    if n == 0:
        raise ValueError("no supervision")
    p = pred.clamp(EPS, 1.0 - EPS)
    per_pixel = torch.where(pos, -cfg.weight_positive * torch.log(p),
                            -cfg.weight_negative * torch.log1p(-p))
    per_pixel = torch.where(pos | neg, per_pixel, torch.zeros_like(per_pixel))
    return per_pixel.sum() / n


def has_supervision(labels: torch.Tensor) -> bool:
    return bool((labels != IGNORE).any())


def gated_edge(edge: torch.Tensor, attention: torch.Tensor | None) -> torch.Tensor:
    return edge if attention is None else attention_gate(edge, attention)


def edge_consistency(seg: torch.Tensor, edge: torch.Tensor, attention: torch.Tensor | None = None) -> torch.Tensor:
    """Mean absolute difference between Sobel(seg) and the (gated) edge map."""
    target = sobel(seg)
    gated = gated_edge(edge, attention)
    if target.shape != gated.shape:
        raise ValueError(f"shape mismatch: sobel(seg) {tuple(target.shape)} vs edge {tuple(gated.shape)}")
    return (target - gated).abs().mean()


def total_loss(seg, edge, attention, labels, cfg: LossConfig = LossConfig()) -> LossBreakdown:
    """``ce + lam * edge_consistency``; ``edge=None`` gives the plain CE objective.

    No stop-gradient anywhere: the edge term feeds gradients into the
    segmentation map through the Sobel filter and into both edge and
    attention maps through the gate.
    """
    ce = weighted_partial_ce(seg, labels, cfg)
    if edge is None:
        e = torch.zeros((), dtype=ce.dtype, device=ce.device)
    else:
        if cfg.use_attention and attention is None:
            raise ValueError("use_attention is set but no attention map was given")
        e = edge_consistency(seg, edge, attention if cfg.use_attention else None)
    return LossBreakdown(ce=ce, edge=e, total=ce + cfg.lam * e)
