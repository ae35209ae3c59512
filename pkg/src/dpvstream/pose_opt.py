"""Confidence-weighted photometric refinement of window poses.

Given a depth and confidence map for the reference frame, each source pose
is refined independently by minimizing

    sum_i c_i * huber(I_src(warp(p_i, d_i, T)) - I_ref(p_i)) / n_valid

over the twist of ``T`` with Gauss-Newton (IRLS weights for the robust
loss), falling back to Levenberg damping whenever a step fails to lower
the energy, coarse-to-fine over an image pyramid.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateProblemError, InvalidArgumentError, NumericalFailureError
from .geometry import CameraIntrinsics, Pose, exp_se3, hat, invert, pixel_grid
from .plane_sweep import block_mean, to_gray

logger = logging.getLogger(__name__)

_KEYS_A = -0.5
MIN_TOTAL_WEIGHT = 1e-6


def _keys(s):
    s = np.abs(s)
    a = _KEYS_A
    inner = ((a + 2) * s - (a + 3)) * s * s + 1
    outer = ((a * s - 5 * a) * s + 8 * a) * s - 4 * a
    return np.where(s <= 1, inner, np.where(s < 2, outer, 0.0))


def _keys_derivative(s):
    sign = np.sign(s)
    s = np.abs(s)
    a = _KEYS_A
    inner = (3 * (a + 2) * s - 2 * (a + 3)) * s
    outer = (3 * a * s - 10 * a) * s + 8 * a
    return sign * np.where(s <= 1, inner, np.where(s < 2, outer, 0.0))


def bicubic_sample(image: np.ndarray, x: np.ndarray, y: np.ndarray):
    """Keys cubic-convolution interpolation with its analytic gradient.

    Returns:
        ``(value, grad_x, grad_y, valid)``.  Samples need one pixel of margin
        (``1 <= x < W - 2``); others are invalid and return zeros.
    """
    h, w = image.shape
    valid = np.isfinite(x) & np.isfinite(y) & (x >= 1) & (x < w - 2) & (y >= 1) & (y < h - 2)
    xs = np.where(valid, x, 1.0)
    ys = np.where(valid, y, 1.0)
    x0 = np.floor(xs).astype(np.intp)
    y0 = np.floor(ys).astype(np.intp)
    fx = xs - x0
    fy = ys - y0
    val = np.zeros(xs.shape)
    gx = np.zeros(xs.shape)
    gy = np.zeros(xs.shape)
    for m in range(-1, 3):
        wy = _keys(fy - m)
        dwy = _keys_derivative(fy - m)
        row = y0 + m
        for n in range(-1, 3):
            wx = _keys(fx - n)
            dwx = _keys_derivative(fx - n)
            pix = image[row, x0 + n]
            val += pix * wy * wx
            gx += pix * wy * dwx
            gy += pix * dwy * wx
    return np.where(valid, val, 0.0), np.where(valid, gx, 0.0), np.where(valid, gy, 0.0), valid


def huber(r, delta):
    """L1-like Huber: quadratic within ``delta``, ``|r| - delta/2`` outside."""
    a = np.abs(r)
    return np.where(a <= delta, 0.5 * r * r / delta, a - 0.5 * delta)


def _irls_weight(r, delta, loss):
    a = np.abs(r)
    if loss == "l1":
        return 1.0 / np.maximum(a, 1e-6)
    return np.where(a <= delta, 1.0 / delta, 1.0 / np.maximum(a, 1e-300))


@dataclass(frozen=True, eq=False)
class PoseOptProblem:
    """Inputs for refining the poses of one window.

    Attributes:
        initial_poses: per source, the pose mapping source-camera points into
            the reference camera.
        loss: ``"huber"`` (default) or ``"l1"`` (IRLS on the absolute residual;
            the objective is then pure L1).
    """

    reference: np.ndarray
    sources: tuple
    depth: np.ndarray
    confidence: np.ndarray
    initial_poses: tuple
    intrinsics: CameraIntrinsics
    levels: int = 3
    huber_delta: float = 0.1
    max_iterations: int = 20
    tolerance: float = 1e-6
    loss: str = "huber"

    def __post_init__(self):
        if self.levels < 1:
            raise InvalidArgumentError("pyramid needs at least one level")
        if len(self.sources) != len(self.initial_poses):
            raise InvalidArgumentError("one initial pose per source image is required")
        if self.loss not in ("huber", "l1"):
            raise InvalidArgumentError(f"unknown loss {self.loss!r}")
        conf = np.asarray(self.confidence)
        if np.any(conf < 0) or np.any(conf > 1):
            raise InvalidArgumentError("confidence must lie in [0, 1]")
        shape = (self.intrinsics.height, self.intrinsics.width)
        for arr in (self.reference, self.depth, self.confidence, *self.sources):
            if np.shape(arr)[:2] != shape:
                raise InvalidArgumentError(f"array of shape {np.shape(arr)} does not match intrinsics {shape}")


@dataclass
class PoseOptResult:
    poses: list
    iterations: list
    initial_energy: float
    final_energy: float
    source_initial_energy: list = field(default_factory=list)
    source_final_energy: list = field(default_factory=list)
    rank_deficient: list = field(default_factory=list)


@dataclass
class _Level:
    reference: np.ndarray
    sources: list
    points: np.ndarray  # (M, 3) reference-frame points of valid pixels
    ref_values: np.ndarray
    conf: np.ndarray
    K: CameraIntrinsics


def _downsample_depth(depth, factor):
    d = block_mean(depth, factor)
    valid = block_mean((depth > 0).astype(np.float64), factor) == 1.0
    return np.where(valid, d, 0.0)


def _build_level(problem: PoseOptProblem, level: int) -> _Level:
    f = 2**level
    ref = to_gray(problem.reference)
    srcs = [to_gray(s) for s in problem.sources]
    depth = np.asarray(problem.depth, dtype=np.float64)
    conf = np.asarray(problem.confidence, dtype=np.float64)
    K = problem.intrinsics
    if f > 1:
        ref = block_mean(ref, f)
        srcs = [block_mean(s, f) for s in srcs]
        depth = _downsample_depth(depth, f)
        conf = block_mean(conf, f)
        K = K.downsample(f)
    pix = pixel_grid(*ref.shape)
    mask = depth > 0
    u, v, d = pix[..., 0][mask], pix[..., 1][mask], depth[mask]
    points = np.stack([(u - K.cx) * d / K.fx, (v - K.cy) * d / K.fy, d], axis=-1)
    return _Level(ref, srcs, points, ref[mask], conf[mask], K)


def _residuals(lvl: _Level, image: np.ndarray, ref_to_src: Pose, with_jacobian: bool):
    K = lvl.K
    y = ref_to_src.apply(lvl.points)
    z = y[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        zs = np.where(z > 1e-9, z, np.nan)
        u = K.fx * y[:, 0] / zs + K.cx
        v = K.fy * y[:, 1] / zs + K.cy
    val, gx, gy, valid = bicubic_sample(image, u, v)
    r = val - lvl.ref_values
    if not with_jacobian:
        return r, valid, None
    zv = np.where(valid, zs, 1.0)
    # d(pixel)/d(point) rows, then chain with d(point)/d(twist) = [-hat(y), I]
    du = np.stack([K.fx / zv, np.zeros_like(zv), -K.fx * y[:, 0] / zv**2], axis=-1)
    dv = np.stack([np.zeros_like(zv), K.fy / zv, -K.fy * y[:, 1] / zv**2], axis=-1)
    j_point = gx[:, None] * du + gy[:, None] * dv
    j_rot = np.cross(y, j_point)
    jac = np.concatenate([j_rot, j_point], axis=-1)
    return r, valid, np.where(valid[:, None], jac, 0.0)


def residual_jacobian(problem: PoseOptProblem, source_index: int, ref_to_src: Pose, level: int = 0):
    """Residuals, validity and analytic Jacobian (w.r.t. a left twist on
    ``ref_to_src``) for one source at one pyramid level."""
    lvl = _build_level(problem, level)
    return _residuals(lvl, lvl.sources[source_index], ref_to_src, True)


def _energy_terms(lvl: _Level, image, ref_to_src, delta, loss):
    r, valid, _ = _residuals(lvl, image, ref_to_src, False)
    rho = np.abs(r) if loss == "l1" else huber(r, delta)
    return float(np.sum(lvl.conf[valid] * rho[valid])), int(valid.sum())


def photometric_objective(problem: PoseOptProblem, poses=None, level: int = 0) -> float:
    """Confidence-weighted robust photometric energy over all sources.

    Args:
        poses: source-to-reference poses (defaults to the initial poses).

    Raises:
        DegenerateProblemError: if no pixel of any source is valid.
    """
    poses = problem.initial_poses if poses is None else poses
    lvl = _build_level(problem, level)
    total, count = 0.0, 0
    for image, pose in zip(lvl.sources, poses):
        e, n = _energy_terms(lvl, image, invert(pose), problem.huber_delta, problem.loss)
        total += e
        count += n
    if count == 0:
        raise DegenerateProblemError("no valid pixels in any source frame")
    return total / count


def _source_energy(lvl, image, ref_to_src, problem):
    e, n = _energy_terms(lvl, image, ref_to_src, problem.huber_delta, problem.loss)
    return e / n if n else np.inf


def _normal_equations(lvl: _Level, image, ref_to_src: Pose, problem: PoseOptProblem):
    r, valid, jac = _residuals(lvl, image, ref_to_src, True)
    w = np.where(valid, lvl.conf * _irls_weight(r, problem.huber_delta, problem.loss), 0.0)
    return jac.T @ (w[:, None] * jac), jac.T @ (w * r)


def _is_deficient(hess) -> bool:
    eig = np.linalg.eigvalsh(hess)
    return bool(eig[-1] <= 0 or eig[0] <= 1e-12 * eig[-1])


def _already_converged(lvl: _Level, image, ref_to_src: Pose, problem: PoseOptProblem) -> bool:
    """True when the undamped step at full resolution is below the tolerance."""
    hess, grad = _normal_equations(lvl, image, ref_to_src, problem)
    if _is_deficient(hess):
        return False
    return float(np.linalg.norm(np.linalg.solve(hess, grad))) < problem.tolerance


def _refine_level(lvl: _Level, image, ref_to_src: Pose, problem: PoseOptProblem):
    """Damped Gauss-Newton on one level.  Returns ``(pose, iterations, rank_deficient)``."""
    energy = _source_energy(lvl, image, ref_to_src, problem)
    if not np.isfinite(energy):
        return ref_to_src, 0, False
    damping = 0.0
    iterations = 0
    for _ in range(problem.max_iterations):
        hess, grad = _normal_equations(lvl, image, ref_to_src, problem)
        if _is_deficient(hess):
            return ref_to_src, iterations, True
        iterations += 1
        accepted = False
        for _attempt in range(10):
            lhs = hess + damping * np.diag(np.diag(hess))
            delta = -np.linalg.solve(lhs, grad)
            candidate = exp_se3(delta) @ ref_to_src
            new_energy = _source_energy(lvl, image, candidate, problem)
            if np.isnan(new_energy):
                raise NumericalFailureError("energy became NaN", last_iterate=invert(ref_to_src))
            if new_energy <= energy:
                accepted = True
                ref_to_src, energy = candidate, new_energy
                damping = damping / 10.0 if damping > 1e-8 else 0.0
                break
            damping = max(damping * 10.0, 1e-4)
        if not accepted or np.linalg.norm(delta) < problem.tolerance:
            break
    return ref_to_src, iterations, False


def optimize_window_poses(problem: PoseOptProblem) -> PoseOptResult:
    """Refine every source pose coarse-to-fine; the full-resolution energy never increases.

    Raises:
        DegenerateProblemError: if the confidence mass or valid pixel count is zero.
        NumericalFailureError: if the energy becomes non-finite.
    """
    if float(np.sum(problem.confidence)) < MIN_TOTAL_WEIGHT:
        raise DegenerateProblemError("total confidence weight is zero; nothing to align")
    levels = [_build_level(problem, lv) for lv in range(problem.levels)]
    fine = levels[0]
    initial_energy = photometric_objective(problem)

    poses, iterations, init_e, final_e, deficient = [], [], [], [], []
    for k, pose in enumerate(problem.initial_poses):
        start = invert(pose)
        current = start
        its = 0
        rank_def = False
        # the coarse levels are slightly biased by block averaging, so a pose
        # that is already optimal at full resolution is not sent through them
        if _already_converged(fine, fine.sources[k], start, problem):
            its = 1
            levels_to_run = []
        else:
            levels_to_run = list(reversed(levels))
        for lvl in levels_to_run:
            current, n, rd = _refine_level(lvl, lvl.sources[k], current, problem)
            its += n
            rank_def = rank_def or rd
        e0 = _source_energy(fine, fine.sources[k], start, problem)
        e1 = _source_energy(fine, fine.sources[k], current, problem)
        if not np.isfinite(e1) and np.isfinite(e0) or e1 > e0:
            current, e1 = start, e0
        poses.append(invert(current))
        iterations.append(its)
        init_e.append(e0)
        final_e.append(e1)
        deficient.append(rank_def)
        logger.debug("source %d: %d iterations, energy %.6g -> %.6g", k, its, e0, e1)

    final_energy = photometric_objective(problem, poses)
    if not np.isfinite(final_energy):
        raise NumericalFailureError("final energy is not finite", last_iterate=poses)
    return PoseOptResult(poses, iterations, initial_energy, final_energy, init_e, final_e, deficient)
