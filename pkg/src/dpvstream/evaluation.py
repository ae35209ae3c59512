"""Depth-map error metrics with median scale normalization."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .errors import DegenerateProblemError, InvalidArgumentError


@dataclass(frozen=True)
class DepthMetrics:
    delta1: float
    delta2: float
    delta3: float
    abs_rel: float
    sq_rel: float
    rmse: float
    rmse_log: float
    scale_inv: float
    count: int = 0

    def as_dict(self):
        return asdict(self)

    def to_text(self) -> str:
        """Flat ``key: value`` block, one metric per line."""
        return "\n".join(f"{k}: {v:.6f}" if isinstance(v, float) else f"{k}: {v}" for k, v in asdict(self).items())

    def to_record(self, **extra) -> str:
        """Single-line JSON record."""
        return json.dumps({**extra, **asdict(self)}, sort_keys=True)


def valid_mask(gt: np.ndarray, pred: np.ndarray | None = None, min_depth: float = 0.0, max_depth: float = np.inf):
    """Pixels with ground truth in ``(min_depth, max_depth]``; 0 marks missing depth."""
    mask = (gt > 0) & (gt > min_depth) & (gt <= max_depth)
    if pred is not None:
        mask &= pred > 0
    return mask


def scale_normalize(pred: np.ndarray, gt: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    """Scale ``pred`` so its median over jointly valid pixels matches the ground truth's."""
    if mask is None:
        mask = (gt > 0) & (pred > 0)
    if not mask.any():
        raise DegenerateProblemError("no jointly valid pixels for scale normalization")
    med_pred = np.median(pred[mask])
    med_gt = np.median(gt[mask])
    if med_pred == 0 or med_gt == 0:
        raise DegenerateProblemError("zero median depth")
    return pred * (med_gt / med_pred)


def compute_metrics(pred: np.ndarray, gt: np.ndarray, mask: np.ndarray | None = None) -> DepthMetrics:
    """Standard monocular depth metrics over ``mask`` (default: ``gt > 0``).

    Thresholded accuracies are percentages.  ``scale_inv`` is the variance of
    the log-ratio, ``mean(g^2) - mean(g)^2`` with ``g = log pred - log gt``.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if mask is None:
        mask = gt > 0
    if not mask.any():
        raise DegenerateProblemError("no valid pixels to evaluate")
    p, g = pred[mask], gt[mask]
    if np.any(p <= 0) or np.any(g <= 0):
        raise InvalidArgumentError("non-positive depth inside the evaluation mask")

    ratio = np.maximum(p / g, g / p)
    diff = p - g
    log_diff = np.log(p) - np.log(g)
    return DepthMetrics(
        delta1=float(100.0 * np.mean(ratio < 1.25)),
        delta2=float(100.0 * np.mean(ratio < 1.25**2)),
        delta3=float(100.0 * np.mean(ratio < 1.25**3)),
        abs_rel=float(np.mean(np.abs(diff) / g)),
        sq_rel=float(np.mean(diff**2 / g)),
        rmse=float(np.sqrt(np.mean(diff**2))),
        rmse_log=float(np.sqrt(np.mean(log_diff**2))),
        scale_inv=float(max(np.mean(log_diff**2) - np.mean(log_diff) ** 2, 0.0)),
        count=int(mask.sum()),
    )


def aggregate(metrics: list[DepthMetrics]) -> DepthMetrics:
    """Pixel-count-weighted mean of per-frame metrics (rmse terms pooled in squared form)."""
    if not metrics:
        raise DegenerateProblemError("no metrics to aggregate")
    counts = [m.count for m in metrics]
    total = float(sum(counts))

    # divide once at the end so identical frames aggregate exactly
    def mean(name):
        return float(sum(c * getattr(m, name) for c, m in zip(counts, metrics)) / total)

    def pooled_rms(name):
        return float(np.sqrt(sum(c * getattr(m, name) ** 2 for c, m in zip(counts, metrics)) / total))

    return DepthMetrics(
        delta1=mean("delta1"),
        delta2=mean("delta2"),
        delta3=mean("delta3"),
        abs_rel=mean("abs_rel"),
        sq_rel=mean("sq_rel"),
        rmse=pooled_rms("rmse"),
        rmse_log=pooled_rms("rmse_log"),
        scale_inv=mean("scale_inv"),
        count=int(sum(m.count for m in metrics)),
    )
