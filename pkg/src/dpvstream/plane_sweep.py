"""Plane-sweep measurement model: a depth volume from a five-frame window.

Descriptors are computed on a quarter-resolution grid.  Each source frame's
descriptors are warped into the reference view through fronto-parallel
planes at every depth hypothesis, and the per-plane matching cost becomes a
distribution through a softmax.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import uniform_filter

from . import dpv as dpv_mod
from .dpv import DepthHypotheses, DepthProbabilityVolume
from .errors import DegenerateWindowError, InvalidArgumentError
from .geometry import CameraIntrinsics, Pose, invert, pixel_grid

FEATURE_SCALE = 4
CENSUS_RADIUS = 2
CENSUS_WEIGHT = 0.7
INTENSITY_WEIGHT = 0.3
WINDOW_OFFSETS = (-2, -1, 1, 2)
_EDGE_EPS = 1e-6

_CENSUS_OFFSETS = [
    (dy, dx)
    for dy in range(-CENSUS_RADIUS, CENSUS_RADIUS + 1)
    for dx in range(-CENSUS_RADIUS, CENSUS_RADIUS + 1)
    if (dy, dx) != (0, 0)
]


def to_gray(image: np.ndarray) -> np.ndarray:
    """Luma of an RGB image (``0.299 R + 0.587 G + 0.114 B``); grayscale passes through."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 3:
        return image[..., :3] @ np.array([0.299, 0.587, 0.114])
    return image


def block_mean(image: np.ndarray, factor: int) -> np.ndarray:
    """Average non-overlapping ``factor x factor`` blocks (trailing remainder dropped)."""
    h, w = image.shape[0] // factor, image.shape[1] // factor
    img = image[: h * factor, : w * factor]
    return img.reshape(h, factor, w, factor, *image.shape[2:]).mean(axis=(1, 3))


def census(image: np.ndarray) -> np.ndarray:
    """5x5 census transform encoded as ``sign(neighbor - centre)`` per channel.

    Returns an ``(H, W, 24)`` array of -1/0/+1 with ties mapped to 0 and
    borders replicated.
    """
    r = CENSUS_RADIUS
    padded = np.pad(image, r, mode="edge")
    h, w = image.shape
    out = np.empty((h, w, len(_CENSUS_OFFSETS)))
    for c, (dy, dx) in enumerate(_CENSUS_OFFSETS):
        out[..., c] = np.sign(padded[r + dy : r + dy + h, r + dx : r + dx + w] - image)
    return out


def extract_features(image: np.ndarray) -> np.ndarray:
    """Quarter-resolution descriptor grid of shape ``(H//4, W//4, 25)``.

    Channel 0 is the block-averaged intensity.  Channels 1..24 are census
    bits of the 3x3 box-filtered full-resolution image, averaged over the same
    4x4 blocks.  Averaging keeps the descriptor smooth under sub-cell warps
    (raw +-1 bits resampled bilinearly favour integer shifts and bias the
    sweep); the box pre-filter suppresses bit flips from sensor noise.

    Raises:
        InvalidArgumentError: if the image is smaller than 16x16.
    """
    gray = to_gray(image)
    if gray.ndim != 2 or min(gray.shape) < 16:
        raise InvalidArgumentError(f"image must be at least 16x16, got {gray.shape}")
    small = block_mean(gray, FEATURE_SCALE)
    bits = block_mean(census(uniform_filter(gray, 3, mode="nearest")), FEATURE_SCALE)
    return np.concatenate([small[..., None], bits], axis=-1)


def bilinear_sample(grid: np.ndarray, x: np.ndarray, y: np.ndarray):
    """Sample ``grid[..., c]`` at fractional ``(x, y)``.

    Returns:
        ``(values, valid)``; samples outside ``[0, W-1] x [0, H-1]`` (beyond a
        1e-6 rounding margin, or NaN coordinates) are invalid and their values
        are edge-clamped garbage.
    """
    h, w = grid.shape[:2]
    eps = _EDGE_EPS
    valid = (x >= -eps) & (x <= w - 1 + eps) & (y >= -eps) & (y <= h - 1 + eps)
    xc = np.clip(np.nan_to_num(x, nan=0.0), 0, w - 1)
    yc = np.clip(np.nan_to_num(y, nan=0.0), 0, h - 1)
    x0 = np.minimum(np.floor(xc).astype(np.intp), max(w - 2, 0))
    y0 = np.minimum(np.floor(yc).astype(np.intp), max(h - 2, 0))
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    ax = xc - x0
    ay = yc - y0
    if grid.ndim == 3:
        ax, ay = ax[..., None], ay[..., None]
    top = grid[y0, x0] * (1 - ax) + grid[y0, x1] * ax
    bottom = grid[y1, x0] * (1 - ax) + grid[y1, x1] * ax
    return top * (1 - ay) + bottom * ay, valid


def warp_coordinates(depth, ref_to_src: Pose, K: CameraIntrinsics, K_src: CameraIntrinsics | None = None):
    """Source-grid coordinates of every reference pixel lifted to ``depth``.

    ``depth`` is a scalar (fronto-parallel plane) or a per-pixel map.
    """
    K_src = K_src or K
    pix = pixel_grid(K.height, K.width)
    depth = np.broadcast_to(np.asarray(depth, dtype=np.float64), pix.shape[:2])
    pts = np.stack(
        [(pix[..., 0] - K.cx) * depth / K.fx, (pix[..., 1] - K.cy) * depth / K.fy, depth], axis=-1
    )
    pts = ref_to_src.apply(pts)
    z = pts[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        z_safe = np.where(z > 0, z, np.nan)
        x = K_src.fx * pts[..., 0] / z_safe + K_src.cx
        y = K_src.fy * pts[..., 1] / z_safe + K_src.cy
    return x, y


def warp_features(src: np.ndarray, depth: float, ref_to_src: Pose, K: CameraIntrinsics):
    """Resample source descriptors into the reference grid through the plane at ``depth``.

    Args:
        src: ``(h, w, C)`` source feature grid.
        depth: plane depth in the reference camera (metres).
        ref_to_src: pose mapping reference-camera points into the source camera.
        K: intrinsics of the feature grid (see ``CameraIntrinsics.downsample``).

    Returns:
        ``(warped, valid)`` arrays of shape ``(h, w, C)`` and ``(h, w)``.
    """
    if not depth > 0:
        raise InvalidArgumentError("plane depth must be positive")
    x, y = warp_coordinates(depth, ref_to_src, K)
    return bilinear_sample(src, x, y)


@dataclass(frozen=True, eq=False)
class FrameWindow:
    """A reference frame and four neighbours at offsets ``(-2, -1, +1, +2) * stride``.

    Attributes:
        relative_poses: per source, the pose mapping source-camera points into
            the reference camera (``delta_T_{k,ref}``).
        reference_pose: world-from-camera pose of the reference frame, used to
            chain windows in time.
    """

    reference: np.ndarray
    sources: tuple
    relative_poses: tuple
    intrinsics: CameraIntrinsics
    reference_timestamp: float = 0.0
    offsets: tuple = WINDOW_OFFSETS
    reference_pose: Pose = field(default_factory=Pose.identity)

    def __post_init__(self):
        if len(self.sources) != 4 or len(self.relative_poses) != 4 or len(self.offsets) != 4:
            raise InvalidArgumentError("window requires 5 frames (a reference and 4 sources)")
        offs = sorted(self.offsets)
        if offs != sorted(-o for o in offs) or 0 in offs:
            raise InvalidArgumentError(f"window offsets must be symmetric about the reference, got {self.offsets}")
        shape = np.shape(self.reference)
        if any(np.shape(s) != shape for s in self.sources):
            raise InvalidArgumentError("all window images must have the same size")
        if shape[:2] != (self.intrinsics.height, self.intrinsics.width):
            raise InvalidArgumentError(
                f"image size {shape[:2]} does not match intrinsics {self.intrinsics.height}x{self.intrinsics.width}"
            )

    @property
    def feature_intrinsics(self) -> CameraIntrinsics:
        return self.intrinsics.downsample(FEATURE_SCALE)

    def with_poses(self, relative_poses) -> "FrameWindow":
        return FrameWindow(
            self.reference,
            self.sources,
            tuple(relative_poses),
            self.intrinsics,
            self.reference_timestamp,
            self.offsets,
            self.reference_pose,
        )


@dataclass(frozen=True, eq=False)
class CostVolume:
    cost: np.ndarray
    valid_counts: np.ndarray
    hypotheses: DepthHypotheses


def descriptor_distance(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Weighted L1 distance: intensity channel plus mean census disagreement."""
    d_int = np.abs(a[..., 0] - b[..., 0])
    d_census = np.abs(a[..., 1:] - b[..., 1:]).mean(axis=-1)
    return INTENSITY_WEIGHT * d_int + CENSUS_WEIGHT * d_census


def build_cost_volume(window: FrameWindow, hyps: DepthHypotheses, smooth: bool = True) -> CostVolume:
    """Mean descriptor distance over valid source frames for every plane.

    Cells that no source frame observes at a plane take the pixel's maximum
    cost over the planes where it is observed; pixels never observed get a
    flat cost.  With ``smooth`` each cost slice is box-filtered over 3x3 cells.

    Raises:
        DegenerateWindowError: if no source sample is valid anywhere.
    """
    K = window.feature_intrinsics
    ref = extract_features(window.reference)
    srcs = [extract_features(s) for s in window.sources]
    to_src = [invert(p) for p in window.relative_poses]
    h, w = ref.shape[:2]
    total = np.zeros((h, w, hyps.count))
    counts = np.zeros((h, w, hyps.count), dtype=np.int64)
    for k, d in enumerate(hyps.centers):
        for feat, pose in zip(srcs, to_src):
            warped, valid = warp_features(feat, d, pose, K)
            dist = descriptor_distance(ref, warped)
            total[..., k] += np.where(valid, dist, 0.0)
            counts[..., k] += valid
    if counts.sum() == 0:
        raise DegenerateWindowError("no source frame overlaps the reference view")

    seen = counts > 0
    cost = np.where(seen, total / np.maximum(counts, 1), -np.inf)
    fill = cost.max(axis=-1, keepdims=True)
    fill = np.where(np.isfinite(fill), fill, 0.0)
    cost = np.where(seen, cost, fill)
    if smooth:
        cost = uniform_filter(cost, size=(3, 3, 1), mode="nearest")
    return CostVolume(cost, counts, hyps)


def measure_dpv(
    window: FrameWindow,
    hyps: DepthHypotheses,
    temperature: float | None = None,
    smooth: bool = True,
) -> DepthProbabilityVolume:
    """Cost volume followed by the softmax over negated costs."""
    cv = build_cost_volume(window, hyps, smooth=smooth)
    return dpv_mod.from_cost(cv.cost, hyps, temperature)
