"""Supervision losses

Combined loss, dynamic balancing schedule, supervision gate, and
distance-transform weighting of positive pixels.
"""
__all__ = [
    "LossConfig", "SupervisionTier", "lambda_schedule", "gamma_indicator", "dilate_mask",
    "distance_weight_mask", "downsample_max", "prepare_targets", "segmentation_loss",
    "classification_loss", "total_loss", "OUTPUT_STRIDE"]
import logging
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Tuple

import numpy as np
import torch
from scipy import ndimage
from torch.nn import functional as F

log = logging.getLogger(__name__)
#: S_h resolution relative to the input
OUTPUT_STRIDE = 8
# 8-connectivity for ground-truth regions
_REGIONS = np.ones((3, 3), dtype=bool)


class SupervisionTier(str, Enum):
    NEGATIVE = "negative"
    POSITIVE_PIXEL_LABELED = "positive_pixel_labeled"
    POSITIVE_WEAK = "positive_weak"


@dataclass(frozen=True)
class LossConfig:
    delta: float = 1.0
    w_pos: float = 1.0
    p: float = 1.0
    dilation_kernel: int = 1
    dynamic_balancing: bool = True
    distance_transform_enabled: bool = True
    per_region_max: bool = True
    lambda_fallback: float = 0.5

    def __post_init__(self):
        for name in ("delta", "w_pos", "p"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.dilation_kernel < 1 or self.dilation_kernel % 2 == 0:
            raise ValueError(f"dilation_kernel must be odd and >=1, got {self.dilation_kernel}")
        if not 0 <= self.lambda_fallback <= 1:
            raise ValueError(f"lambda_fallback must be in [0, 1], got {self.lambda_fallback}")


def lambda_schedule(n: int, n_ep: int, dynamic_balancing: bool = True,
                    fallback: float = 0.5) -> float:
    """balancing factor: 1 - n/n_ep, or the constant `fallback` when not balancing"""
    if n_ep <= 0:
        raise ValueError(f"n_ep must be positive, got {n_ep}")
    if not 0 <= n <= n_ep:
        raise ValueError(f"epoch index {n} outside [0, {n_ep}]")
    if not dynamic_balancing:
        return float(fallback)
    return (n_ep - n) / n_ep


def gamma_indicator(tier: SupervisionTier) -> int:
    """1 when a segmentation target is available (negatives, pixel-labelled positives)"""
    return 0 if SupervisionTier(tier) is SupervisionTier.POSITIVE_WEAK else 1


def dilate_mask(mask: np.ndarray, kernel: int) -> np.ndarray:
    """binary dilation with a `kernel`x`kernel` square"""
    if kernel < 1 or kernel % 2 == 0:
        raise ValueError(f"dilation kernel must be odd and >=1, got {kernel}")
    mask = np.asarray(mask) > 0
    if kernel == 1:
        return mask.astype(np.uint8)
    return ndimage.binary_dilation(mask, structure=np.ones((kernel, kernel), dtype=bool),
                                   border_value=0).astype(np.uint8)


def distance_weight_mask(mask: np.ndarray, w_pos: float, p: float,
                         per_region_max: bool = True) -> np.ndarray:
    """
    Per-pixel loss weights: 1 on negatives, `w_pos * (D / D_max) ** p` on positives,
    where D is the Euclidean distance to the nearest negative pixel and D_max its
    maximum within the pixel's 8-connected region (or the whole image if
    not `per_region_max`).
    """
    mask = np.asarray(mask) > 0
    weights = np.ones(mask.shape, dtype=np.float64)
    if not mask.any():
        return weights
    if mask.all():
        weights[:] = w_pos
        return weights
    dist = ndimage.distance_transform_edt(mask)
    if per_region_max:
        labels, num = ndimage.label(mask, structure=_REGIONS)
        dmax = np.asarray(ndimage.maximum(dist, labels, index=np.arange(1, num + 1)))
        dmax = np.concatenate([[1.0], dmax])[labels]
    else:
        dmax = np.full(mask.shape, dist.max())
    weights[mask] = w_pos * (dist[mask] / dmax[mask])**p
    return weights


def downsample_max(arr: np.ndarray, stride: int = OUTPUT_STRIDE) -> np.ndarray:
    """block maximum over `stride`x`stride` cells"""
    arr = np.asarray(arr)
    h, w = arr.shape
    if h % stride or w % stride:
        raise ValueError(f"shape {arr.shape} is not divisible by {stride}")
    return arr.reshape(h // stride, stride, w // stride, stride).max(axis=(1, 3))


def prepare_targets(mask: Optional[np.ndarray], shape: Tuple[int, int], config: LossConfig,
                    tier: SupervisionTier) -> Optional[Tuple[np.ndarray, np.ndarray]]:
    """
    Segmentation (target, weights) at S_h resolution for one sample.

    Full-resolution order: dilate, then distance weighting, then block-max
    downsampling of both maps. Weak positives (gamma=0) get `None`:
    no weight mask is computed for them.
    """
    tier = SupervisionTier(tier)
    out_shape = (shape[0] // OUTPUT_STRIDE, shape[1] // OUTPUT_STRIDE)
    if tier is SupervisionTier.POSITIVE_WEAK:
        return None
    if tier is SupervisionTier.NEGATIVE or mask is None:
        if tier is SupervisionTier.POSITIVE_PIXEL_LABELED:
            raise ValueError("pixel-labelled positive without a mask")
        return np.zeros(out_shape, dtype=np.float32), np.ones(out_shape, dtype=np.float32)
    mask = dilate_mask(mask, config.dilation_kernel)
    if config.distance_transform_enabled:
        weights = distance_weight_mask(mask, config.w_pos, config.p,
                                       per_region_max=config.per_region_max)
    else:
        weights = np.ones(mask.shape)
    return (downsample_max(mask).astype(np.float32), downsample_max(weights).astype(np.float32))


def segmentation_loss(seg_logits: torch.Tensor, target: torch.Tensor, weights: torch.Tensor,
                      reduction: str = "mean") -> torch.Tensor:
    """
    Weighted binary cross-entropy averaged over pixels (not over the weight sum).
    Args:
      reduction: "mean" over everything, or "sample" for one value per leading index
    """
    if seg_logits.shape != target.shape or seg_logits.shape != weights.shape:
        raise ValueError(f"shape mismatch: logits {tuple(seg_logits.shape)},"
                         f" target {tuple(target.shape)}, weights {tuple(weights.shape)}")
    pixel = F.binary_cross_entropy_with_logits(seg_logits, target, reduction="none") * weights
    if reduction == "sample":
        return pixel.flatten(1).mean(1)
    return pixel.mean()


def classification_loss(cls_logit: torch.Tensor, label: torch.Tensor,
                        reduction: str = "mean") -> torch.Tensor:
    cls_logit = torch.as_tensor(cls_logit)
    label = torch.as_tensor(label, dtype=cls_logit.dtype)
    return F.binary_cross_entropy_with_logits(
        cls_logit, label, reduction="none" if reduction == "sample" else reduction)


def total_loss(l_seg, l_cls, lam: float, gamma, delta: float):
    """lam * gamma * l_seg + (1 - lam) * delta * l_cls (works on floats and tensors)"""
    if not 0 <= lam <= 1:
        raise ValueError(f"lambda must be in [0, 1], got {lam}")
    return lam * gamma * l_seg + (1 - lam) * delta * l_cls
