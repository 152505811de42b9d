"""Differentiable training losses: focal, generalized Dice, and composites.

All losses consume post-sigmoid probabilities and binary targets, use mean
reduction, and accept torch tensors or numpy arrays (numpy inputs are
converted; gradients flow only through tensor inputs). Focal and
cross-entropy terms clamp probabilities to [eps, 1 - eps]; the generalized
Dice loss needs no clamp and is exactly 0 for a perfect binary prediction.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .dataio import ValidationError

ANCHOR_POSITIVE = 1
ANCHOR_NEGATIVE = 0
ANCHOR_IGNORE = -1


@dataclass
class LossConfig:
    alpha: float = 0.25
    gamma: float = 2.0
    lambda_det: float = 10.0
    lambda_seg: float = 10.0
    epsilon_stability: float = 1e-7

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValidationError("alpha must be in (0,1)")
        if self.gamma < 0:
            raise ValidationError("gamma must be >= 0")
        if self.lambda_det < 0 or self.lambda_seg < 0:
            raise ValidationError("loss weights must be >= 0")
        if self.epsilon_stability <= 0:
            raise ValidationError("epsilon_stability must be positive")


def _as_tensor(x) -> torch.Tensor:
    return x if isinstance(x, torch.Tensor) else torch.as_tensor(x)


def _check_pair(probs, targets):
    probs = _as_tensor(probs)
    targets = _as_tensor(targets).to(probs.dtype)
    if probs.shape != targets.shape:
        raise ValidationError(f"shape mismatch: probs {tuple(probs.shape)} vs targets {tuple(targets.shape)}")
    if probs.numel() == 0:
        raise ValidationError("empty input")
    return probs, targets


def binary_cross_entropy(probs, targets, eps: float = 1e-7) -> torch.Tensor:
    probs, targets = _check_pair(probs, targets)
    p = probs.clamp(eps, 1.0 - eps)
    return -(targets * p.log() + (1.0 - targets) * (1.0 - p).log()).mean()


def focal_loss(probs, targets, alpha: float = 0.25, gamma: float = 2.0,
               eps: float = 1e-7) -> torch.Tensor:
    """Mean of -alpha_t * (1 - p_t)^gamma * log(p_t), alpha_t = alpha on positives."""
    probs, targets = _check_pair(probs, targets)
    p = probs.clamp(eps, 1.0 - eps)
    p_t = p * targets + (1.0 - p) * (1.0 - targets)
    alpha_t = alpha * targets + (1.0 - alpha) * (1.0 - targets)
    return (-alpha_t * (1.0 - p_t) ** gamma * p_t.log()).mean()


def generalized_dice_loss(probs, targets) -> torch.Tensor:
    """Two-class generalized Dice loss with w = 1 / max(class volume, 1)^2."""
    probs, targets = _check_pair(probs, targets)
    p = probs.reshape(-1)
    r = targets.reshape(-1)
    num = torch.zeros((), dtype=p.dtype)
    den = torch.zeros((), dtype=p.dtype)
    for r_l, p_l in ((r, p), (1.0 - r, 1.0 - p)):
        w = 1.0 / torch.clamp(r_l.sum(), min=1.0) ** 2
        num = num + w * (r_l * p_l).sum()
        den = den + w * (r_l + p_l).sum()
    return 1.0 - 2.0 * num / den


def detection_loss(class_probs, box_deltas, anchor_labels, anchor_box_targets,
                   lambda_det: float = 10.0, eps: float = 1e-7) -> torch.Tensor:
    """Mean BCE over non-ignored anchors + lambda * mean L1 over positive anchors.

    anchor_labels: 1 positive, 0 negative, -1 ignore, aligned with class_probs.
    """
    class_probs = _as_tensor(class_probs).reshape(-1)
    labels = _as_tensor(anchor_labels).reshape(-1)
    box_deltas = _as_tensor(box_deltas).reshape(-1, 4)
    box_targets = _as_tensor(anchor_box_targets).reshape(-1, 4).to(box_deltas.dtype)
    if class_probs.shape[0] != labels.shape[0] or box_deltas.shape[0] != labels.shape[0]:
        raise ValidationError("anchor arrays are not aligned")
    valid = labels >= 0
    if not bool(valid.any()):
        raise ValidationError("no non-ignored anchors")
    l_class = binary_cross_entropy(class_probs[valid], labels[valid].to(class_probs.dtype), eps=eps)
    positive = labels == ANCHOR_POSITIVE
    if bool(positive.any()):
        l_box = (box_deltas[positive] - box_targets[positive]).abs().mean()
        return l_class + lambda_det * l_box
    return l_class


def segmentation_loss(probs, targets, config: LossConfig | None = None) -> torch.Tensor:
    """generalized_dice_loss + lambda_seg * focal_loss."""
    config = config or LossConfig()
    return generalized_dice_loss(probs, targets) + config.lambda_seg * focal_loss(
        probs, targets, alpha=config.alpha, gamma=config.gamma, eps=config.epsilon_stability
    )
