"""Saliency evaluation metrics (KLD, CC, SIM, NSS, AUC-Judd).

All computations run in float64. Degenerate inputs return documented
sentinels with a warning instead of NaN.
"""
from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DegenerateMapWarning, DegenerateTargetError, UndefinedMetricError
from .saliency import FixationMap

EPS = 1e-7
METRICS = ("kld", "cc", "sim", "nss", "auc_j")


def _arr(x):
    return np.asarray(getattr(x, "grid", x), dtype=np.float64)


def _fix_mask(fix, shape):
    if isinstance(fix, FixationMap):
        mask = fix.grid.astype(bool)
    else:
        mask = np.asarray(fix).astype(bool)
    if mask.shape != shape:
        raise ValueError(f"fixation grid {mask.shape} does not match prediction {shape}")
    return mask


def metric_kld(pred, gt) -> float:
    """KL(gt || pred) on sum-normalised maps, epsilon-regularised.

    The epsilon terms can push identical maps a hair below zero; the result
    is clipped at 0.
    """
    p, g = _arr(pred), _arr(gt)
    if g.sum() <= 0:
        raise DegenerateTargetError("ground-truth map sums to zero")
    g = g / g.sum()
    p = p / (p.sum() + EPS)
    return max(float(np.sum(g * np.log(g / (p + EPS) + EPS))), 0.0)


def metric_cc(pred, gt) -> float:
    p, g = _arr(pred).ravel(), _arr(gt).ravel()
    if p.std() == 0 or g.std() == 0:
        warnings.warn("CC undefined for a constant map; returning 0", DegenerateMapWarning, stacklevel=2)
        return 0.0
    p = p - p.mean()
    g = g - g.mean()
    return float(np.clip(np.dot(p, g) / math.sqrt(np.dot(p, p) * np.dot(g, g)), -1.0, 1.0))


def metric_sim(pred, gt) -> float:
    p, g = _arr(pred), _arr(gt)
    if p.sum() <= 0 or g.sum() <= 0:
        warnings.warn("SIM undefined for an all-zero map; returning 0", DegenerateMapWarning, stacklevel=2)
        return 0.0
    return float(np.minimum(p / p.sum(), g / g.sum()).sum())


def metric_nss(pred, fix) -> float:
    p = _arr(pred)
    mask = _fix_mask(fix, p.shape)
    if not mask.any():
        raise UndefinedMetricError("NSS needs at least one fixation")
    std = p.std()
    if std == 0:
        warnings.warn("NSS undefined for a constant map; returning 0", DegenerateMapWarning, stacklevel=2)
        return 0.0
    return float(((p - p.mean()) / std)[mask].mean())


def metric_auc_judd(pred, fix) -> float:
    """ROC area with one threshold per fixated value (pixel counts as hit if >= t)."""
    p = _arr(pred)
    mask = _fix_mask(fix, p.shape)
    n_fix = int(mask.sum())
    if n_fix == 0:
        raise UndefinedMetricError("AUC-Judd needs at least one fixation")
    n_pix = p.size
    if n_fix == n_pix:
        raise UndefinedMetricError("AUC-Judd needs at least one non-fixated pixel")
    thresholds = np.unique(p[mask])[::-1]
    flat = np.sort(p.ravel())
    fix_sorted = np.sort(p[mask])
    above_all = n_pix - np.searchsorted(flat, thresholds, side="left")
    above_fix = n_fix - np.searchsorted(fix_sorted, thresholds, side="left")
    tp = np.concatenate([[0.0], above_fix / n_fix, [1.0]])
    fp = np.concatenate([[0.0], (above_all - above_fix) / (n_pix - n_fix), [1.0]])
    return float(np.trapezoid(tp, fp) if hasattr(np, "trapezoid") else np.trapz(tp, fp))


def evaluate_sample(pred, gt, fix) -> dict[str, float]:
    return {
        "kld": metric_kld(pred, gt),
        "cc": metric_cc(pred, gt),
        "sim": metric_sim(pred, gt),
        "nss": metric_nss(pred, fix),
        "auc_j": metric_auc_judd(pred, fix),
    }


@dataclass
class EvalReport:
    rows: list[dict] = field(default_factory=list)

    def add(self, sample_id: str, values: dict[str, float]):
        self.rows.append({"id": sample_id, **values})

    @property
    def count(self) -> int:
        return len(self.rows)

    def aggregate(self) -> dict[str, float]:
        if not self.rows:
            return {m: float("nan") for m in METRICS}
        return {m: float(np.mean([r[m] for r in self.rows])) for m in METRICS}

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["id", *METRICS])
            writer.writeheader()
            for r in self.rows:
                writer.writerow({k: (f"{v:.10g}" if isinstance(v, float) else v) for k, v in r.items()})

    def write_summary(self, path, extra: dict | None = None):
        payload = {"count": self.count, **self.aggregate(), **(extra or {})}
        Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
        return payload
