"""Depth probability volumes and the per-pixel statistics derived from them.

A volume stores, for every pixel, a discrete distribution over ``N`` depth
hypotheses spaced uniformly in inverse depth.  Arrays are laid out
``(H, W, N)`` with the hypothesis axis last and hypotheses stored in
ascending depth order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .errors import InvalidArgumentError

PROB_FLOOR = 1e-30
INVALID_DEPTH = 0.0


@dataclass(frozen=True, eq=False)
class DepthHypotheses:
    """Depth planes ``d_min .. d_max``, uniform in disparity."""

    d_min: float
    d_max: float
    count: int
    centers: np.ndarray

    @property
    def disparities(self) -> np.ndarray:
        return 1.0 / self.centers

    @property
    def disparity_step(self) -> float:
        """Signed disparity increment between consecutive bins (negative)."""
        return (1.0 / self.d_max - 1.0 / self.d_min) / (self.count - 1)

    def index_of(self, depth) -> np.ndarray:
        """Continuous bin coordinate of ``depth`` (0 at ``d_min``, N-1 at ``d_max``)."""
        depth = np.asarray(depth, dtype=np.float64)
        with np.errstate(divide="ignore", invalid="ignore"):
            return (1.0 / depth - 1.0 / self.d_min) / self.disparity_step

    def nearest_index(self, depth) -> np.ndarray:
        """Bin whose centre is closest to ``depth`` in metres."""
        depth = np.asarray(depth, dtype=np.float64)
        return np.argmin(np.abs(depth[..., None] - self.centers), axis=-1)

    def same_as(self, other: "DepthHypotheses") -> bool:
        return self.count == other.count and np.array_equal(self.centers, other.centers)


def make_hypotheses(d_min: float, d_max: float, count: int = 64) -> DepthHypotheses:
    """Build ``count`` depth planes uniform in inverse depth.

    Raises:
        InvalidArgumentError: unless ``0 < d_min < d_max`` and ``count >= 2``.
    """
    if not (0 < d_min < d_max):
        raise InvalidArgumentError(f"need 0 < d_min < d_max, got {d_min}, {d_max}")
    if int(count) != count or count < 2:
        raise InvalidArgumentError(f"need at least 2 hypotheses, got {count}")
    count = int(count)
    k = np.arange(count, dtype=np.float64)
    disparity = 1.0 / d_min + k * (1.0 / d_max - 1.0 / d_min) / (count - 1)
    centers = 1.0 / disparity
    centers[0], centers[-1] = d_min, d_max
    centers.setflags(write=False)
    return DepthHypotheses(float(d_min), float(d_max), count, centers)


@dataclass(frozen=True, eq=False)
class DepthProbabilityVolume:
    """Per-pixel probabilities ``values[v, u, k]`` over ``hypotheses``.

    Attributes:
        degenerate_pixels: number of all-zero pixels replaced by the uniform
            distribution when the volume was normalized.
    """

    hypotheses: DepthHypotheses
    values: np.ndarray
    degenerate_pixels: int = 0

    def __post_init__(self):
        if self.values.ndim != 3 or self.values.shape[-1] != self.hypotheses.count:
            raise InvalidArgumentError(
                f"volume shape {self.values.shape} does not match {self.hypotheses.count} hypotheses"
            )

    @property
    def shape(self):
        return self.values.shape

    def to_log(self) -> "LogVolume":
        return LogVolume(self.hypotheses, -np.log(np.maximum(self.values, PROB_FLOOR)))


@dataclass(frozen=True, eq=False)
class LogVolume:
    """Negative-log volume ``E = -log p``; need not be normalized."""

    hypotheses: DepthHypotheses
    values: np.ndarray

    def __post_init__(self):
        if self.values.ndim != 3 or self.values.shape[-1] != self.hypotheses.count:
            raise InvalidArgumentError(
                f"volume shape {self.values.shape} does not match {self.hypotheses.count} hypotheses"
            )

    @property
    def shape(self):
        return self.values.shape

    def normalized(self) -> "LogVolume":
        """Shift each pixel so that ``exp(-E)`` sums to one."""
        return LogVolume(self.hypotheses, normalize_log(self.values))

    def to_dpv(self) -> DepthProbabilityVolume:
        e = self.values - self.values.min(axis=-1, keepdims=True)
        p = np.exp(-e)
        return DepthProbabilityVolume(self.hypotheses, p / p.sum(axis=-1, keepdims=True))


def normalize_log(energy: np.ndarray) -> np.ndarray:
    """Per-pixel log-normalization of a negative-log volume."""
    return energy + logsumexp(-energy, axis=-1, keepdims=True)


def uniform(hypotheses: DepthHypotheses, height: int, width: int) -> DepthProbabilityVolume:
    return DepthProbabilityVolume(
        hypotheses, np.full((height, width, hypotheses.count), 1.0 / hypotheses.count)
    )


def normalize(raw, hypotheses: DepthHypotheses) -> DepthProbabilityVolume:
    """Rescale non-negative per-pixel weights to sum to one.

    All-zero pixels become uniform and are counted in
    ``degenerate_pixels`` instead of raising.
    """
    raw = np.asarray(raw, dtype=np.float64)
    if np.any(raw < 0) or not np.all(np.isfinite(raw)):
        raise InvalidArgumentError("raw volume must be finite and non-negative")
    total = raw.sum(axis=-1, keepdims=True)
    degenerate = total[..., 0] <= 0
    safe_total = np.where(total > 0, total, 1.0)
    values = np.where(total > 0, raw / safe_total, 1.0 / raw.shape[-1])
    return DepthProbabilityVolume(hypotheses, values, int(degenerate.sum()))


DEFAULT_SPREAD_FRACTION = 0.05


def cost_spread(cost: np.ndarray) -> float:
    """Mean over pixels of the per-pixel cost range (max - min over planes)."""
    spread = cost.max(axis=-1) - cost.min(axis=-1)
    return float(spread.mean())


_FLAT_SPREAD = 1e-9


def default_temperature(cost: np.ndarray, fraction: float = DEFAULT_SPREAD_FRACTION) -> float:
    """``fraction`` of the mean per-pixel cost spread.

    A volume whose spread is at rounding-noise level (below ``1e-9`` of the
    cost magnitude, or absolutely below ``1e-9``) counts as flat and gets a
    temperature of 1.0, so float noise is not amplified into structure.
    """
    spread = cost_spread(cost)
    scale = max(1.0, float(np.max(np.abs(cost)))) if cost.size else 1.0
    if spread <= _FLAT_SPREAD * scale:
        return 1.0
    return fraction * spread


def from_cost(cost, hypotheses: DepthHypotheses, temperature: float | None = None) -> DepthProbabilityVolume:
    """Softmax over ``-cost / temperature`` along the hypothesis axis.

    Low cost means high probability.  With ``temperature=None`` the scale is
    :func:`default_temperature`, so the result does not depend on the units
    of the matching cost.

    Raises:
        InvalidArgumentError: on NaN costs or a non-positive temperature.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if np.isnan(cost).any():
        raise InvalidArgumentError("cost volume contains NaN")
    if temperature is None:
        temperature = default_temperature(cost)
    if not temperature > 0:
        raise InvalidArgumentError(f"temperature must be positive, got {temperature}")
    logits = -cost / temperature
    logits -= logits.max(axis=-1, keepdims=True)
    p = np.exp(logits)
    p /= p.sum(axis=-1, keepdims=True)
    return DepthProbabilityVolume(hypotheses, p)


def expected_depth(dpv: DepthProbabilityVolume) -> np.ndarray:
    """Probability-weighted mean depth per pixel, clamped to the hypothesis range."""
    h = dpv.hypotheses
    d = dpv.values @ h.centers
    return np.clip(d, h.d_min, h.d_max)


def argmax_depth(dpv: DepthProbabilityVolume) -> np.ndarray:
    """Depth of the most probable bin per pixel."""
    return dpv.hypotheses.centers[np.argmax(dpv.values, axis=-1)]


def confidence(dpv: DepthProbabilityVolume, depth: np.ndarray) -> np.ndarray:
    """Probability at ``depth``, linearly interpolated in disparity between bins."""
    h = dpv.hypotheses
    idx = np.clip(h.index_of(np.clip(depth, h.d_min, h.d_max)), 0, h.count - 1)
    lo = np.floor(idx).astype(np.intp)
    lo = np.minimum(lo, h.count - 2)
    frac = idx - lo
    p_lo = np.take_along_axis(dpv.values, lo[..., None], axis=-1)[..., 0]
    p_hi = np.take_along_axis(dpv.values, lo[..., None] + 1, axis=-1)[..., 0]
    return np.clip((1.0 - frac) * p_lo + frac * p_hi, 0.0, 1.0)


def depth_and_confidence(dpv: DepthProbabilityVolume):
    d = expected_depth(dpv)
    return d, confidence(dpv, d)


def mask_low_confidence(depth: np.ndarray, conf: np.ndarray, threshold: float) -> np.ndarray:
    """Copy of ``depth`` with pixels below ``threshold`` confidence set to 0."""
    if not 0.0 <= threshold <= 1.0:
        raise InvalidArgumentError(f"threshold must be in [0, 1], got {threshold}")
    return np.where(conf < threshold, INVALID_DEPTH, depth)
