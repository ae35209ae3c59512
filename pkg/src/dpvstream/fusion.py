"""Temporal fusion of depth volumes: predict by 3D warping, then update.

Beliefs are kept as negative-log volumes ``E = -log p``.  In that form the
Bayesian product is a sum, and damping the prediction multiplies its
energy by a weight:

* ``bayes``           ``E = E_pred + E_meas``
* ``global_damping``  ``E = lam * E_pred + E_meas``
* ``adaptive``        ``E = gain(u, v) * E_pred + E_meas`` where the
  per-pixel gain drops below one when the measurement disagrees with the
  prediction (see :func:`adaptive_gain`)
* ``none``            ``E = E_meas`` (no temporal integration)

Every output is renormalized per pixel.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dpv import DepthProbabilityVolume, LogVolume, normalize_log
from .errors import InvalidArgumentError
from .geometry import CameraIntrinsics, Pose, invert, pixel_grid, relative_pose
from .plane_sweep import FrameWindow, measure_dpv

MODES = ("none", "bayes", "global_damping", "adaptive")
_EDGE_EPS = 1e-6


@dataclass(frozen=True)
class GainConfig:
    """Update rule and its parameters.

    Attributes:
        mode: one of ``none``, ``bayes``, ``global_damping``, ``adaptive``.
        damping: prediction weight for ``global_damping``.
        kappa: residual scale (nats) at which the adaptive gain reaches its floor.
        min_gain: floor of the adaptive prediction weight.
    """

    mode: str = "adaptive"
    damping: float = 0.8
    kappa: float = 2.0
    min_gain: float = 0.2

    def __post_init__(self):
        if self.mode not in MODES:
            raise InvalidArgumentError(f"unknown fusion mode {self.mode!r}; expected one of {MODES}")
        if not 0.0 <= self.damping <= 1.0:
            raise InvalidArgumentError(f"damping must be in [0, 1], got {self.damping}")
        if not self.kappa > 0:
            raise InvalidArgumentError(f"kappa must be positive, got {self.kappa}")
        if not 0.0 <= self.min_gain <= 1.0:
            raise InvalidArgumentError(f"min_gain must be in [0, 1], got {self.min_gain}")


@dataclass(frozen=True, eq=False)
class FilterState:
    """Running belief expressed in the camera of the last reference frame."""

    belief: LogVolume
    pose: Pose
    timestamp: float

    @property
    def hypotheses(self):
        return self.belief.hypotheses


def _as_log(volume) -> LogVolume:
    if isinstance(volume, DepthProbabilityVolume):
        return volume.to_log()
    return volume


def _check_compatible(a: LogVolume, b: LogVolume):
    if a.values.shape != b.values.shape or not a.hypotheses.same_as(b.hypotheses):
        raise InvalidArgumentError(
            f"volume mismatch: shapes {a.values.shape} vs {b.values.shape} or different hypotheses"
        )


def _trilinear(volume: np.ndarray, y, x, k):
    """Sample ``volume[y, x, k]`` at fractional coordinates already inside the grid."""
    h, w, n = volume.shape
    y0 = np.minimum(np.floor(y).astype(np.intp), max(h - 2, 0))
    x0 = np.minimum(np.floor(x).astype(np.intp), max(w - 2, 0))
    k0 = np.minimum(np.floor(k).astype(np.intp), n - 2)
    ay, ax, ak = y - y0, x - x0, k - k0
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    out = np.zeros(np.shape(y))
    for yy, wy in ((y0, 1 - ay), (y1, ay)):
        for xx, wx in ((x0, 1 - ax), (x1, ax)):
            for kk, wk in ((k0, 1 - ak), (k0 + 1, ak)):
                out += wy * wx * wk * volume[yy, xx, kk]
    return out


def predict(belief: LogVolume, motion: Pose, K: CameraIntrinsics) -> LogVolume:
    """Warp a belief into the next camera.

    Args:
        belief: belief in the previous camera frame.
        motion: pose mapping previous-camera points into the new camera
            (``delta_T_{t,t+1}``).
        K: intrinsics of the belief grid.

    Each target voxel is lifted to 3D, moved into the previous camera and
    trilinearly sampled there, with the hypothesis axis indexed in disparity.
    Voxels falling outside the previous frustum get the uniform prior.
    """
    hyps = belief.hypotheses
    h, w, n = belief.values.shape
    if (K.height, K.width) != (h, w):
        raise InvalidArgumentError(f"intrinsics {K.height}x{K.width} do not match belief grid {h}x{w}")
    prob = belief.to_dpv().values

    pix = pixel_grid(h, w)[:, :, None, :]
    d = hyps.centers[None, None, :]
    pts = np.stack(
        np.broadcast_arrays((pix[..., 0] - K.cx) * d / K.fx, (pix[..., 1] - K.cy) * d / K.fy, d),
        axis=-1,
    )
    old = invert(motion).apply(pts)
    z = old[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        z_safe = np.where(z > 0, z, np.nan)
        u = K.fx * old[..., 0] / z_safe + K.cx
        v = K.fy * old[..., 1] / z_safe + K.cy
        k = hyps.index_of(z_safe)
    inside = (
        (u >= -_EDGE_EPS) & (u <= w - 1 + _EDGE_EPS)
        & (v >= -_EDGE_EPS) & (v <= h - 1 + _EDGE_EPS)
        & (k >= -_EDGE_EPS) & (k <= n - 1 + _EDGE_EPS)
    )
    u = np.clip(np.where(inside, u, 0.0), 0, w - 1)
    v = np.clip(np.where(inside, v, 0.0), 0, h - 1)
    k = np.clip(np.where(inside, k, 0.0), 0, n - 1)
    sampled = _trilinear(prob, v, u, k)
    warped = np.where(inside, sampled, 1.0 / n)
    warped /= warped.sum(axis=-1, keepdims=True)
    return DepthProbabilityVolume(hyps, warped).to_log().normalized()


def update_bayes(pred: LogVolume, meas) -> LogVolume:
    """Bayesian product of prediction and measurement (sum of energies)."""
    meas = _as_log(meas)
    _check_compatible(pred, meas)
    return LogVolume(pred.hypotheses, normalize_log(pred.values + meas.values))


def update_global_damping(pred: LogVolume, meas, damping: float = 0.8) -> LogVolume:
    """Update with the prediction energy scaled by ``damping`` in ``[0, 1]``."""
    if not 0.0 <= damping <= 1.0:
        raise InvalidArgumentError(f"damping must be in [0, 1], got {damping}")
    meas = _as_log(meas)
    _check_compatible(pred, meas)
    return LogVolume(pred.hypotheses, normalize_log(damping * pred.values + meas.values))


def residual(meas, pred) -> np.ndarray:
    """Measurement minus prediction energy after per-pixel log-normalization."""
    meas, pred = _as_log(meas), _as_log(pred)
    _check_compatible(pred, meas)
    return normalize_log(meas.values) - normalize_log(pred.values)


def disagreement(pred: LogVolume, meas) -> np.ndarray:
    """Prediction-weighted mean residual per pixel, ``sum_k p_pred(k) * dE(k)``.

    This equals KL(pred || meas): zero when the two distributions agree and
    large where the measurement gives little mass to what the prediction
    believes.  Unlike the unweighted mean of ``|dE|`` it stays small when a
    sharp prediction meets a broad but consistent measurement.
    """
    meas = _as_log(meas)
    d_e = residual(meas, pred)
    p_pred = pred.to_dpv().values
    return np.maximum((p_pred * d_e).sum(axis=-1), 0.0)


def adaptive_gain(pred: LogVolume, meas, kappa: float = 2.0, min_gain: float = 0.2) -> np.ndarray:
    """Per-pixel prediction weight in ``[min_gain, 1]``.

    ``gain = 1 - (1 - min_gain) * clamp(s / kappa, 0, 1)`` with ``s`` the
    :func:`disagreement`.  Consistent pixels keep the full Bayesian update;
    pixels whose measurement contradicts the prediction by ``kappa`` nats or
    more fall back towards the measurement.
    """
    if not kappa > 0:
        raise InvalidArgumentError(f"kappa must be positive, got {kappa}")
    s = disagreement(pred, meas)
    return 1.0 - (1.0 - min_gain) * np.clip(s / kappa, 0.0, 1.0)


def update_adaptive(pred: LogVolume, meas, cfg: GainConfig = GainConfig(), gain: np.ndarray | None = None) -> LogVolume:
    """Residual-gated update ``E = gain * E_pred + E_meas``.

    Args:
        gain: optional ``(H, W)`` override of the per-pixel gain; a gain of one
            everywhere reproduces :func:`update_bayes` exactly.
    """
    meas = _as_log(meas)
    _check_compatible(pred, meas)
    if gain is None:
        if not cfg.kappa > 0:
            raise InvalidArgumentError(f"kappa must be positive, got {cfg.kappa}")
        gain = adaptive_gain(pred, meas, cfg.kappa, cfg.min_gain)
    return LogVolume(pred.hypotheses, normalize_log(gain[..., None] * pred.values + meas.values))


def update(pred: LogVolume, meas, cfg: GainConfig) -> LogVolume:
    """Dispatch on ``cfg.mode``."""
    if cfg.mode == "none":
        return _as_log(meas).normalized()
    if cfg.mode == "bayes":
        return update_bayes(pred, meas)
    if cfg.mode == "global_damping":
        return update_global_damping(pred, meas, cfg.damping)
    return update_adaptive(pred, meas, cfg)


def kalman_oracle_1d(prior_mean: float, prior_var: float, obs_mean: float, obs_var: float):
    """Scalar Kalman update (product of two Gaussians).

    Returns:
        ``(posterior_mean, posterior_var)``.  An infinite observation variance
        returns the prior.
    """
    if not (prior_var > 0 and obs_var > 0):
        raise InvalidArgumentError("variances must be positive")
    if np.isinf(obs_var):
        return float(prior_mean), float(prior_var)
    s = prior_var + obs_var
    return (prior_mean * obs_var + obs_mean * prior_var) / s, prior_var * obs_var / s


def initial_state(window: FrameWindow, hyps, temperature=None, smooth=True) -> FilterState:
    meas = measure_dpv(window, hyps, temperature, smooth)
    return FilterState(meas.to_log().normalized(), window.reference_pose, window.reference_timestamp)


def step(
    state: FilterState | None,
    window: FrameWindow,
    cfg: GainConfig,
    hyps=None,
    temperature=None,
    smooth=True,
    measurement: DepthProbabilityVolume | None = None,
) -> FilterState:
    """One predict/measure/update cycle for a new reference frame.

    ``state=None`` starts a stream from the window's measurement alone.
    ``measurement`` may be passed when the caller already computed it.
    """
    if hyps is None:
        if state is None:
            raise InvalidArgumentError("hypotheses are required to start a stream")
        hyps = state.hypotheses
    if state is not None and not window.reference_timestamp > state.timestamp:
        raise InvalidArgumentError(
            f"window timestamp {window.reference_timestamp} does not follow state timestamp {state.timestamp}"
        )
    meas = measurement if measurement is not None else measure_dpv(window, hyps, temperature, smooth)
    meas_log = meas.to_log().normalized()
    if state is None or cfg.mode == "none":
        return FilterState(meas_log, window.reference_pose, window.reference_timestamp)
    motion = relative_pose(state.pose, window.reference_pose)
    pred = predict(state.belief, motion, window.feature_intrinsics)
    return FilterState(update(pred, meas_log, cfg), window.reference_pose, window.reference_timestamp)
