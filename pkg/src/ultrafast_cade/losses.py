"""Focal classification loss and smooth-L1 box regression loss."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .anchors import AnchorAssignments

PROB_EPS = 1e-12


@dataclass
class LossConfig:
    gamma: float = 2.0
    alpha: float = 0.25
    smooth_l1_beta: float = 1.0
    normalize_by_positives: bool = True

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")
        if self.smooth_l1_beta <= 0:
            raise ValueError("smooth_l1_beta must be > 0")


def focal_loss(p, y, gamma: float = 2.0, alpha: float = 0.25) -> torch.Tensor:
    """Elementwise -alpha_t * (1 - p_t)**gamma * log(p_t) on probabilities."""
    p = torch.as_tensor(p, dtype=torch.float64 if not torch.is_tensor(p) else None)
    y = torch.as_tensor(y, dtype=p.dtype, device=p.device)
    p = p.clamp(PROB_EPS, 1.0 - PROB_EPS)
    p_t = torch.where(y > 0.5, p, 1.0 - p)
    alpha_t = torch.where(y > 0.5, torch.full_like(p, alpha), torch.full_like(p, 1.0 - alpha))
    return -alpha_t * (1.0 - p_t) ** gamma * torch.log(p_t)


def focal_loss_with_logits(logits: torch.Tensor, y: torch.Tensor, gamma: float = 2.0,
                           alpha: float = 0.25) -> torch.Tensor:
    """Same loss evaluated from logits via log-sigmoid, which never hits log(0)."""
    y = y.to(logits.dtype)
    log_p = F.logsigmoid(logits)
    log_1mp = F.logsigmoid(-logits)
    log_pt = y * log_p + (1 - y) * log_1mp
    one_minus_pt = y * torch.exp(log_1mp) + (1 - y) * torch.exp(log_p)
    alpha_t = y * alpha + (1 - y) * (1 - alpha)
    if gamma == 0:
        return -alpha_t * log_pt
    return -alpha_t * one_minus_pt**gamma * log_pt


def smooth_l1(pred, target, beta: float = 1.0) -> torch.Tensor:
    """Smooth-L1 summed over the last axis (the six box offsets)."""
    pred = torch.as_tensor(pred, dtype=torch.float64 if not torch.is_tensor(pred) else None)
    target = torch.as_tensor(target, dtype=pred.dtype, device=pred.device)
    x = (pred - target).abs()
    per_coord = torch.where(x < beta, 0.5 * x**2 / beta, x - 0.5 * beta)
    return per_coord.sum(dim=-1)


class LossBreakdown(NamedTuple):
    total: torch.Tensor
    focal: torch.Tensor
    regression: torch.Tensor
    num_positive: int


def stack_assignments(assignments: Sequence[AnchorAssignments], device=None, dtype=torch.float32):
    labels = torch.as_tensor(np.stack([a.positive for a in assignments]), device=device)
    targets = torch.as_tensor(np.stack([a.targets for a in assignments]), device=device, dtype=dtype)
    return labels, targets


def total_loss(cls_logits: torch.Tensor, box_deltas: torch.Tensor,
               assignments: Sequence[AnchorAssignments], config: LossConfig | None = None) -> LossBreakdown:
    """Batch loss.

    cls_logits: (B, N) anchor logits; box_deltas: (B, N, 6).  Focal loss is
    summed over every anchor, smooth-L1 over positives only, and both are
    divided by the positive-anchor count of the batch (at least 1).
    """
    config = config or LossConfig()
    labels, targets = stack_assignments(assignments, cls_logits.device, box_deltas.dtype)
    focal = focal_loss_with_logits(cls_logits, labels, config.gamma, config.alpha).sum()
    n_pos = int(labels.sum())
    if n_pos:
        reg = smooth_l1(box_deltas[labels], targets[labels], config.smooth_l1_beta).sum()
    else:
        reg = box_deltas.sum() * 0.0
    norm = max(n_pos, 1) if config.normalize_by_positives else 1
    focal = focal / norm
    reg = reg / norm
    return LossBreakdown(focal + reg, focal, reg, n_pos)
