"""Compound segmentation loss: weighted soft Dice + binary cross-entropy."""

from __future__ import annotations

from dataclasses import dataclass

import torch

from promptseg.errors import ConfigurationError, ShapeError

BCE_CLAMP = 1e-7


@dataclass
class LossConfig:
    lambda1: float = 1.0  # Dice weight
    lambda2: float = 1.0  # BCE weight
    epsilon: float = 1.0  # soft-Dice smoothing

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ConfigurationError("loss weights must be >= 0")
        if self.lambda1 + self.lambda2 <= 0:
            raise ConfigurationError("at least one loss weight must be > 0")
        if self.epsilon <= 0:
            raise ConfigurationError("epsilon must be > 0")


def _check_shapes(probs: torch.Tensor, target: torch.Tensor) -> None:
    if probs.shape != target.shape:
        raise ShapeError(
            f"probs shape {tuple(probs.shape)} != target shape {tuple(target.shape)}"
        )


def dice_loss(
    probs: torch.Tensor, target: torch.Tensor, epsilon: float = 1.0
) -> torch.Tensor:
    """Soft Dice loss 1 - (2*sum(p*t) + eps) / (sum(p) + sum(t) + eps).

    Linear (not squared) sums in the denominator. Value in [0, 1);
    differentiable in probs.
    """
    _check_shapes(probs, target)
    target = target.to(probs.dtype)
    inter = (probs * target).sum()
    denom = probs.sum() + target.sum() + epsilon
    return 1.0 - (2.0 * inter + epsilon) / denom


def bce_loss(probs: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean binary cross-entropy over pixels, probs clamped to
    [1e-7, 1 - 1e-7] before the logs."""
    _check_shapes(probs, target)
    target = target.to(probs.dtype)
    p = probs.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP)
    return -(target * torch.log(p) + (1.0 - target) * torch.log(1.0 - p)).mean()


def total_loss(
    probs: torch.Tensor, target: torch.Tensor, cfg: LossConfig
) -> torch.Tensor:
    """lambda1 * dice_loss + lambda2 * bce_loss."""
    return cfg.lambda1 * dice_loss(probs, target, cfg.epsilon) + cfg.lambda2 * bce_loss(
        probs, target
    )


def loss_terms(
    probs: torch.Tensor, target: torch.Tensor, cfg: LossConfig
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """(total, dice term, bce term) — the total is the same weighted sum
    total_loss computes."""
    d = dice_loss(probs, target, cfg.epsilon)
    b = bce_loss(probs, target)
    return cfg.lambda1 * d + cfg.lambda2 * b, d, b


def batch_loss_terms(
    probs: torch.Tensor, target: torch.Tensor, cfg: LossConfig
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Per-sample losses over a [B, H, W] batch, averaged.

    Dice is computed per sample (a tiny mask must not drown in the batch
    sums) and BCE per pixel; both use the same formulas as the single-image
    functions.
    """
    _check_shapes(probs, target)
    if probs.ndim != 3:
        raise ShapeError(f"expected [B, H, W] probabilities, got {tuple(probs.shape)}")
    target = target.to(probs.dtype)
    inter = (probs * target).sum(dim=(1, 2))
    denom = probs.sum(dim=(1, 2)) + target.sum(dim=(1, 2)) + cfg.epsilon
    d = (1.0 - (2.0 * inter + cfg.epsilon) / denom).mean()
    p = probs.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP)
    b = -(target * torch.log(p) + (1.0 - target) * torch.log(1.0 - p)).mean()
    return cfg.lambda1 * d + cfg.lambda2 * b, d, b
