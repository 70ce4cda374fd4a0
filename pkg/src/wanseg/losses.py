"""Segmentation, domain-discrimination, adversarial and weak-label objectives.

Every loss is a mean-reduced binary cross-entropy, so the loss weights keep the
same meaning whatever the patch size.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from wanseg.core.functional import bce
from wanseg.core.tensor import Tensor
from wanseg.errors import ContractError


@dataclass(frozen=True)
class LossWeights:
    lambda_adv: float = 0.0
    alpha_hd: float = 0.0

    def __post_init__(self):
        for name in ("lambda_adv", "alpha_hd"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ContractError(f"{name} must be finite and non-negative, got {v}")


def _require_binary(labels: np.ndarray, what: str) -> None:
    if labels.size and not np.all((labels == 0) | (labels == 1)):
        raise ContractError(f"{what} must contain only 0 and 1")


def seg_loss(seg: Tensor, mask) -> Tensor:
    """Pixel-wise BCE of the segmentation map against a binary mask."""
    m = mask.data if isinstance(mask, Tensor) else np.asarray(mask)
    if seg.shape != m.shape:
        raise ContractError(f"seg_loss shape mismatch: {seg.shape} vs {m.shape}")
    _require_binary(m, "segmentation mask")
    return bce(seg, m.astype(seg.dtype, copy=False))


def disc_loss(scores_source: Tensor, scores_target: Tensor) -> Tensor:
    """Source scores pushed to 1, target scores to 0; the two means are summed."""
    return bce(scores_source, 1.0) + bce(scores_target, 0.0)


def adv_loss(scores_target: Tensor) -> Tensor:
    """``-mean(log D(target))``: the generator gains when target looks like source."""
    return bce(scores_target, 1.0)


def weak_label_loss(pred: Tensor, labels) -> Tensor:
    y = labels.data if isinstance(labels, Tensor) else np.asarray(labels)
    if pred.shape != y.shape:
        raise ContractError(f"weak_label_loss shape mismatch: {pred.shape} vs {y.shape}")
    _require_binary(y, "weak labels")
    return bce(pred, y.astype(pred.dtype, copy=False))


def generator_loss(seg_term, hd_term, weights: LossWeights):
    return seg_term + weights.alpha_hd * hd_term


def combined_loss(seg_term, hd_term, adv_term, weights: LossWeights):
    return generator_loss(seg_term, hd_term, weights) + weights.lambda_adv * adv_term
