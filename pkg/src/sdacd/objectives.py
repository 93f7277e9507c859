"""Supervised change-detection losses and the weighted multitask total."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from typing import Callable, Sequence

import torch

from .errors import ConfigError, NumericalError, ShapeError

PROB_FLOOR = 1e-7


@dataclass(frozen=True)
class LossWeights:
    lambda_cyc: float = 10.0
    lambda_i: float = 1.0
    lambda_f: float = 0.1
    lambda_cd: float = 1.0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not math.isfinite(v) or v < 0:
                raise ConfigError(f"loss weight {f.name} must be finite and >= 0, got {v}")


def _same_shape(probs, gt):
    if probs.shape != gt.shape:
        raise ShapeError(f"prediction {tuple(probs.shape)} and ground truth {tuple(gt.shape)} differ")


def inverse_frequency_weights(gt: torch.Tensor, lo: float = 0.1, hi: float = 10.0) -> tuple[float, float]:
    """``(w0, w1)`` balancing no-change and change pixels, clamped to ``[lo, hi]``."""
    n = gt.numel()
    n_change = float(gt.sum())
    n_none = n - n_change
    w1 = n / (2 * n_change) if n_change else hi
    w0 = n / (2 * n_none) if n_none else hi
    return min(max(w0, lo), hi), min(max(w1, lo), hi)


def weighted_cross_entropy(probs: torch.Tensor, gt: torch.Tensor, class_weights=(1.0, 1.0),
                           eps: float = PROB_FLOOR) -> torch.Tensor:
    _same_shape(probs, gt)
    w0, w1 = class_weights
    if w0 <= 0 or w1 <= 0:
        raise ConfigError(f"class weights must be positive, got {class_weights}")
    y = gt.to(probs.dtype)
    loss = w1 * y * torch.log(probs.clamp_min(eps)) + w0 * (1 - y) * torch.log((1 - probs).clamp_min(eps))
    return -loss.mean()


def dice_loss(probs: torch.Tensor, gt: torch.Tensor, smooth: float = 1.0) -> torch.Tensor:
    _same_shape(probs, gt)
    if smooth <= 0:
        raise ConfigError(f"dice smoothing must be positive, got {smooth}")
    y = gt.to(probs.dtype)
    inter = (probs * y).sum()
    return 1 - (2 * inter + smooth) / (probs.sum() + y.sum() + smooth)


def hybrid_loss(probs, gt, class_weights=None, smooth=1.0) -> torch.Tensor:
    """Weighted cross-entropy plus dice; the default per-prediction loss."""
    if class_weights is None:
        class_weights = inverse_frequency_weights(gt)
    return weighted_cross_entropy(probs, gt, class_weights) + dice_loss(probs, gt, smooth)


def change_detection_loss(per_pair_preds: Sequence[torch.Tensor], final_pred: torch.Tensor | None,
                          gt: torch.Tensor, class_weights=None, smooth: float = 1.0,
                          loss_fn: Callable = hybrid_loss):
    """Returns ``(per_pair, final, total)`` where total sums every term.

    ``final_pred`` may be None when only the per-pair terms are needed.
    """
    if not per_pair_preds:
        raise ConfigError("change_detection_loss needs at least one pair prediction")
    if class_weights is None:
        class_weights = inverse_frequency_weights(gt)
    per_pair = [loss_fn(p, gt, class_weights, smooth) for p in per_pair_preds]
    final = loss_fn(final_pred, gt, class_weights, smooth) if final_pred is not None else None
    total = sum(per_pair) + (final if final is not None else 0.0)
    return per_pair, final, total


@dataclass
class LossBundle:
    cyc: float = 0.0
    adv_i: float = 0.0
    adv_f_disc: float = 0.0
    adv_f_conf: float = 0.0
    cd_per_pair: list[float] = field(default_factory=list)
    cd_final: float = 0.0
    total: float = 0.0

    @property
    def cd(self) -> float:
        return sum(self.cd_per_pair) + self.cd_final

    def row(self) -> dict[str, float | str]:
        cd = list(self.cd_per_pair) + [""] * (3 - len(self.cd_per_pair))
        return {
            "cyc": self.cyc, "adv_i": self.adv_i, "adv_f_disc": self.adv_f_disc,
            "adv_f_conf": self.adv_f_conf, "cd_0": cd[0], "cd_1": cd[1], "cd_2": cd[2],
            "cd_final": self.cd_final, "total": self.total,
        }


def combine_objective(cyc, adv_i, adv_f, cd, w: LossWeights):
    return w.lambda_cyc * cyc + w.lambda_i * adv_i + w.lambda_f * adv_f + w.lambda_cd * cd


def total_objective(bundle: LossBundle, w: LossWeights, phase: str = "detector") -> float:
    """Weighted sum of a bundle's components.

    ``phase="detector"`` uses the confusion loss as the feature-adaptation term
    (extractor/classifier updates); ``phase="domain"`` uses the domain
    discriminator's own loss.
    """
    if phase not in ("detector", "domain"):
        raise ConfigError(f"unknown phase {phase!r}")
    parts = {"cyc": bundle.cyc, "adv_i": bundle.adv_i, "adv_f_disc": bundle.adv_f_disc,
             "adv_f_conf": bundle.adv_f_conf, "cd_final": bundle.cd_final}
    parts.update({f"cd_{i}": v for i, v in enumerate(bundle.cd_per_pair)})
    for name, v in parts.items():
        if not math.isfinite(float(v)):
            raise NumericalError(f"loss component {name} is not finite ({v})")
    adv_f = bundle.adv_f_conf if phase == "detector" else bundle.adv_f_disc
    return combine_objective(bundle.cyc, bundle.adv_i, adv_f, bundle.cd, w)
