"""Training losses: pixel cross-entropy, soft Dice, and consistency MSE.

Every function takes probabilities (post-softmax), not logits, and accepts
either plain floats (for the weighted total) or scalar/batched tensors, so the
same code serves unit checks and the differentiable training path.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch

CE_CLAMP = 1e-12
DICE_EPS = 1e-5


@dataclass(frozen=True)
class LossWeights:
    w1: float
    w2: float

    def __post_init__(self):
        if not (math.isfinite(self.w1) and math.isfinite(self.w2)):
            raise ValueError("loss weights must be finite")
        if self.w1 < 0 or self.w2 < 0:
            raise ValueError("loss weights must be >= 0")


@dataclass
class LossBreakdown:
    ce: float | torch.Tensor
    dice: float | torch.Tensor
    consistency: float | torch.Tensor
    total: float | torch.Tensor

    def floats(self) -> "LossBreakdown":
        def f(v):
            return float(v.detach() if isinstance(v, torch.Tensor) else v)

        return LossBreakdown(f(self.ce), f(self.dice), f(self.consistency), f(self.total))


def _check_probs_mask(probs: torch.Tensor, mask: torch.Tensor) -> None:
    if probs.dim() != mask.dim() + 1:
        raise ValueError(f"probs rank {probs.dim()} does not fit mask rank {mask.dim()}")
    if probs.shape[-2:] != mask.shape[-2:] or probs.shape[:-3] != mask.shape[:-2]:
        raise ValueError(
            f"probs shape {tuple(probs.shape)} does not fit mask shape {tuple(mask.shape)}")


def ce_loss(probs: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean over pixels of -log p(true class), clamped away from log(0)."""
    _check_probs_mask(probs, mask)
    picked = torch.take_along_dim(probs, mask.long().unsqueeze(-3), dim=-3)
    return -torch.log(picked.clamp(min=CE_CLAMP)).mean()


def dice_loss(probs: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """One minus the smoothed soft Dice of the foreground channel.

    Intersection and sums pool over every pixel given (the whole batch), so a
    batch is treated as one large image.
    """
    _check_probs_mask(probs, mask)
    p = probs.select(-3, 1)
    g = mask.to(probs.dtype)
    inter = (p * g).sum()
    return 1.0 - (2.0 * inter + DICE_EPS) / (p.sum() + g.sum() + DICE_EPS)


def consistency_loss(student_probs: torch.Tensor, teacher_probs: torch.Tensor) -> torch.Tensor:
    """Mean squared difference over every class-pixel entry."""
    if student_probs.shape != teacher_probs.shape:
        raise ValueError(
            f"prediction shapes differ: {tuple(student_probs.shape)} vs "
            f"{tuple(teacher_probs.shape)}")
    return ((student_probs - teacher_probs) ** 2).mean()


def _finite(value: float | torch.Tensor) -> bool:
    if isinstance(value, torch.Tensor):
        return bool(torch.isfinite(value).all())
    return math.isfinite(value)


def total_loss(ce, dice, consistency, weights: LossWeights) -> LossBreakdown:
    """w1 * (ce + dice) + w2 * consistency, rejecting non-finite components."""
    for name, value in (("ce", ce), ("dice", dice), ("consistency", consistency)):
        if not _finite(value):
            raise ValueError(f"non-finite {name} loss: {value}")
    total = weights.w1 * (ce + dice) + weights.w2 * consistency
    return LossBreakdown(ce=ce, dice=dice, consistency=consistency, total=total)
