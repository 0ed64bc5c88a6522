"""Training objective: per-scale BCE + KLD + denoising MSE, averaged over scales."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import ConfigError, DegenerateTargetError, ShapeError

EPS = 1e-7

# lambda_2 per dataset; lambda_1 = 1 and lambda_3 = 1e-3 everywhere
LAMBDA2_PRESETS = {"trafficgaze": 1.0, "dada-2000": 0.2, "bdd-a": 0.1, "drfixd-rainy": 1.0}
TE_PRESETS = {"trafficgaze": 12, "dada-2000": 16, "bdd-a": 15, "drfixd-rainy": 12}


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 0.001

    def __post_init__(self):
        vals = (self.lambda1, self.lambda2, self.lambda3)
        if any(v < 0 for v in vals) or not any(v > 0 for v in vals):
            raise ConfigError(f"loss weights must be >= 0 with at least one > 0, got {vals}")

    @classmethod
    def preset(cls, dataset: str) -> "LossWeights":
        try:
            return cls(1.0, LAMBDA2_PRESETS[dataset.lower()], 0.001)
        except KeyError:
            raise ConfigError(f"no loss preset for dataset {dataset!r}; known: {sorted(LAMBDA2_PRESETS)}") from None


def _same_shape(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def bce_loss(pred, gt):
    """Mean soft-target binary cross entropy with predictions clamped to [eps, 1-eps]."""
    _same_shape(pred, gt)
    p = pred.clamp(EPS, 1 - EPS)
    return -(gt * torch.log(p) + (1 - gt) * torch.log(1 - p)).mean()


def kld_loss(pred, gt):
    """KL(gt || pred) after sum-normalising each map; mean over the batch.

    Inputs are (..., H, W); leading dimensions are treated as the batch.
    """
    _same_shape(pred, gt)
    p = pred.reshape(-1, pred.shape[-2] * pred.shape[-1])
    g = gt.reshape(-1, gt.shape[-2] * gt.shape[-1])
    g_sum = g.sum(dim=1, keepdim=True)
    if (g_sum <= 0).any():
        raise DegenerateTargetError("ground-truth map sums to zero")
    g = g / g_sum
    p = p / (p.sum(dim=1, keepdim=True) + EPS)
    return (g * torch.log(g / (p + EPS) + EPS)).sum(dim=1).mean()


def dd_loss(eps, eps_hat):
    _same_shape(eps, eps_hat)
    return F.mse_loss(eps_hat, eps)


def upsample_to(pred, size):
    if tuple(pred.shape[-2:]) == tuple(size):
        return pred
    return F.interpolate(pred, size=size, mode="bilinear", align_corners=False)


def scale_terms(pred, gt_full, eps, eps_hat):
    """(BCE, KLD, DD) for one scale; ``pred`` is upsampled to ``gt_full``."""
    up = upsample_to(pred, gt_full.shape[-2:])
    return bce_loss(up, gt_full), kld_loss(up, gt_full), dd_loss(eps, eps_hat)


def total_loss(terms, w: LossWeights, scales=(0, 1, 2, 3)):
    """``terms[s] = (bce, kld, dd)``; averaged over ``scales``."""
    missing = [s for s in scales if s not in terms]
    if missing:
        raise ConfigError(f"missing loss terms for scales {missing}")
    acc = 0.0
    for s in scales:
        bce, kld, dd = terms[s]
        acc = acc + w.lambda1 * bce + w.lambda2 * kld + w.lambda3 * dd
    return acc / len(scales)
