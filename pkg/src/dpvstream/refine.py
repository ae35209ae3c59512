"""Edge-aware upsampling of quarter-resolution depth volumes."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .dpv import DepthProbabilityVolume
from .errors import InvalidArgumentError
from .plane_sweep import FEATURE_SCALE, block_mean, to_gray


@dataclass(frozen=True)
class GuidedUpsampleConfig:
    """Joint bilateral upsampling parameters.

    Attributes:
        spatial_sigma: half-width (full-res pixels) of the separable tent
            kernel over low-res samples.  At the upsampling factor (4) the
            kernel reduces to bilinear interpolation.
        range_sigma: Gaussian width on guide-intensity differences, for
            intensities in ``[0, 1]``; ``inf`` disables edge awareness.
        radius: hard cut-off (full-res pixels) on sample distance.
    """

    spatial_sigma: float = 4.0
    range_sigma: float = 0.1
    radius: float = 8.0

    def __post_init__(self):
        if not (self.spatial_sigma > 0 and self.range_sigma > 0 and self.radius > 0):
            raise InvalidArgumentError("upsampling parameters must be positive")


def upsample_dpv(
    dpv: DepthProbabilityVolume,
    guide: np.ndarray,
    cfg: GuidedUpsampleConfig = GuidedUpsampleConfig(),
    factor: int = FEATURE_SCALE,
) -> DepthProbabilityVolume:
    """Upsample every hypothesis plane to the guide's resolution.

    Output pixel ``p`` is a normalized combination of low-res samples ``q``
    weighted by ``tent(|p - q|) * exp(-(I(p) - I(q))^2 / (2 range_sigma^2))``,
    where ``I(q)`` is the guide averaged over the block of cell ``q``.  Pixels
    whose neighbours are all rejected by the range term fall back to the
    spatial kernel alone.

    Raises:
        InvalidArgumentError: unless ``guide`` is ``factor`` times the volume
            size (plus a remainder below ``factor``).
    """
    guide = to_gray(guide)
    h, w, n = dpv.values.shape
    H, W = guide.shape
    if H // factor != h or W // factor != w:
        raise InvalidArgumentError(f"guide {H}x{W} is not {factor}x the volume grid {h}x{w}")

    low_guide = block_mean(guide, factor)
    ys = np.clip((np.arange(H) + 0.5) / factor - 0.5, 0, h - 1)
    xs = np.clip((np.arange(W) + 0.5) / factor - 0.5, 0, w - 1)
    y0 = np.floor(ys).astype(np.intp)
    x0 = np.floor(xs).astype(np.intp)
    reach = min(math.ceil(cfg.radius / factor), math.ceil(cfg.spatial_sigma / factor))

    num = np.zeros((H, W, n))
    den = np.zeros((H, W))
    num_s = np.zeros((H, W, n))
    den_s = np.zeros((H, W))
    for dy in range(-reach + 1, reach + 1):
        qy = y0 + dy
        dist_y = np.abs(ys - qy) * factor
        wy = np.where((qy >= 0) & (qy < h) & (dist_y <= cfg.radius), np.maximum(0.0, 1.0 - dist_y / cfg.spatial_sigma), 0.0)
        qy = np.clip(qy, 0, h - 1)
        if not wy.any():
            continue
        for dx in range(-reach + 1, reach + 1):
            qx = x0 + dx
            dist_x = np.abs(xs - qx) * factor
            wx = np.where((qx >= 0) & (qx < w) & (dist_x <= cfg.radius), np.maximum(0.0, 1.0 - dist_x / cfg.spatial_sigma), 0.0)
            qx = np.clip(qx, 0, w - 1)
            if not wx.any():
                continue
            ws = wy[:, None] * wx[None, :]
            samples = dpv.values[qy[:, None], qx[None, :]]
            if np.isinf(cfg.range_sigma):
                wr = ws
            else:
                diff = guide - low_guide[qy[:, None], qx[None, :]]
                wr = ws * np.exp(-0.5 * (diff / cfg.range_sigma) ** 2)
            num += wr[..., None] * samples
            den += wr
            num_s += ws[..., None] * samples
            den_s += ws

    weak = den < 1e-12
    out = np.where(weak[..., None], num_s / np.maximum(den_s, 1e-300)[..., None], num / np.where(weak, 1.0, den)[..., None])
    out /= out.sum(axis=-1, keepdims=True)
    return DepthProbabilityVolume(dpv.hypotheses, out)
