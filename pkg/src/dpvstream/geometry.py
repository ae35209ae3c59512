"""Pinhole camera model, rigid transforms and se(3) coordinates.

Conventions used throughout the package:

* A :class:`Pose` maps points *from* a source frame *to* a target frame,
  ``x_target = R @ x_source + t``.  The relative pose ``delta_T_{k,ref}`` maps
  frame-``k`` camera coordinates into reference-camera coordinates.
* Pixel ``(u, v)`` addresses column ``u`` and row ``v``; integer coordinates
  are pixel centres.
* A twist is a 6-vector ``(omega, v)``: rotation first, translation second.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import BehindCameraError, InvalidArgumentError, OutOfDomainError

_ORTHO_TOL = 1e-9
# below this angle the closed forms cancel; fourth-order series are exact to ~1e-12
_SMALL_ANGLE = 1e-2


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole projection parameters (pixels)."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise InvalidArgumentError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise InvalidArgumentError(
                f"principal point ({self.cx}, {self.cy}) outside image {self.width}x{self.height}"
            )

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def downsample(self, factor: int) -> "CameraIntrinsics":
        """Intrinsics of an image block-averaged by ``factor`` in both axes.

        Keeps pixel centres consistent: full-res centre ``x`` maps to
        ``(x + 0.5) / factor - 0.5``.
        """
        if factor == 1:
            return self
        return CameraIntrinsics(
            fx=self.fx / factor,
            fy=self.fy / factor,
            cx=(self.cx + 0.5) / factor - 0.5,
            cy=(self.cy + 0.5) / factor - 0.5,
            width=self.width // factor,
            height=self.height // factor,
        )


def _orthonormalize(rotation):
    u, _, vt = np.linalg.svd(rotation)
    r = u @ vt
    if np.linalg.det(r) < 0:
        u[:, -1] *= -1
        r = u @ vt
    return r


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform ``x -> rotation @ x + translation``."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        r = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(r)) and np.all(np.isfinite(t))):
            raise InvalidArgumentError("pose contains non-finite values")
        drift = np.abs(r.T @ r - np.eye(3)).max()
        if drift > 1e-6 or abs(np.linalg.det(r) - 1.0) > 1e-6:
            raise InvalidArgumentError(f"rotation is not orthonormal (drift {drift:.3g})")
        if drift > _ORTHO_TOL * 0.1:
            r = _orthonormalize(r)
        r.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls()

    @classmethod
    def from_matrix(cls, matrix) -> "Pose":
        m = np.asarray(matrix, dtype=np.float64)
        return cls(m[:3, :3], m[:3, 3])

    @classmethod
    def from_quaternion(cls, quat_xyzw, translation) -> "Pose":
        """Build from a unit quaternion in ``(qx, qy, qz, qw)`` order."""
        return cls(Rotation.from_quat(np.asarray(quat_xyzw, dtype=np.float64)).as_matrix(), translation)

    def as_quaternion(self) -> np.ndarray:
        """Unit quaternion ``(qx, qy, qz, qw)`` with ``qw >= 0``."""
        q = Rotation.from_matrix(self.rotation).as_quat()
        return -q if q[3] < 0 else q

    @property
    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def apply(self, points) -> np.ndarray:
        """Transform points of shape ``(..., 3)``."""
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def inverse(self) -> "Pose":
        return invert(self)

    def __matmul__(self, other: "Pose") -> "Pose":
        return compose(self, other)

    def allclose(self, other: "Pose", atol: float = 1e-9) -> bool:
        return bool(
            np.allclose(self.rotation, other.rotation, atol=atol, rtol=0)
            and np.allclose(self.translation, other.translation, atol=atol, rtol=0)
        )

    def __repr__(self):
        return f"Pose(rotation={self.rotation.tolist()}, translation={self.translation.tolist()})"


def compose(a: Pose, b: Pose) -> Pose:
    """Return ``a ∘ b``: apply ``b`` first, then ``a``."""
    return Pose(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def invert(a: Pose) -> Pose:
    rt = a.rotation.T
    return Pose(rt, -rt @ a.translation)


def hat(w) -> np.ndarray:
    """Skew-symmetric matrix with ``hat(w) @ x == cross(w, x)``."""
    w = np.asarray(w, dtype=np.float64)
    return np.array([[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]])


def _so3_coefficients(theta):
    # A = sin(t)/t, B = (1 - cos t)/t^2, C = (t - sin t)/t^3
    if theta < _SMALL_ANGLE:
        t2 = theta * theta
        t4 = t2 * t2
        return (
            1.0 - t2 / 6.0 + t4 / 120.0,
            0.5 - t2 / 24.0 + t4 / 720.0,
            1.0 / 6.0 - t2 / 120.0 + t4 / 5040.0,
        )
    s, c = np.sin(theta), np.cos(theta)
    return s / theta, (1.0 - c) / theta**2, (theta - s) / theta**3


def exp_se3(xi) -> Pose:
    """Exponential map from twist ``(omega, v)`` to a :class:`Pose`."""
    xi = np.asarray(xi, dtype=np.float64).reshape(6)
    omega, v = xi[:3], xi[3:]
    theta = float(np.linalg.norm(omega))
    a, b, c = _so3_coefficients(theta)
    w = hat(omega)
    w2 = w @ w
    rotation = np.eye(3) + a * w + b * w2
    left_jacobian = np.eye(3) + b * w + c * w2
    return Pose(rotation, left_jacobian @ v)


def log_se3(pose: Pose) -> np.ndarray:
    """Logarithm of a pose as a twist ``(omega, v)``.

    Raises:
        OutOfDomainError: if the rotation angle is ``pi`` (within 1e-12),
            where the axis is not unique.
    """
    r = pose.rotation
    vee = np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    sin_theta = 0.5 * np.linalg.norm(vee)
    cos_theta = np.clip(0.5 * (np.trace(r) - 1.0), -1.0, 1.0)
    theta = float(np.arctan2(sin_theta, cos_theta))
    if theta >= np.pi - 1e-12:
        raise OutOfDomainError("rotation angle must be < pi for the logarithm")
    if theta < _SMALL_ANGLE:
        omega = 0.5 * vee * (1.0 + theta**2 / 6.0 + 7.0 * theta**4 / 360.0)
    else:
        omega = theta / (2.0 * sin_theta) * vee
    w = hat(omega)
    if theta < _SMALL_ANGLE:
        coeff = 1.0 / 12.0 + theta**2 / 720.0 + theta**4 / 30240.0
    else:
        coeff = (1.0 - theta * np.sin(theta) / (2.0 * (1.0 - np.cos(theta)))) / theta**2
    inv_left_jacobian = np.eye(3) - 0.5 * w + coeff * (w @ w)
    return np.concatenate([omega, inv_left_jacobian @ pose.translation])


def rotation_angle(pose: Pose) -> float:
    """Rotation magnitude of ``pose`` in radians."""
    return float(np.linalg.norm(log_se3(Pose(pose.rotation, np.zeros(3)))[:3]))


def backproject(pixel, depth, K: CameraIntrinsics) -> np.ndarray:
    """Lift pixel(s) at the given depth(s) into camera coordinates.

    Broadcasts over leading dimensions: ``pixel`` has shape ``(..., 2)`` and
    ``depth`` shape ``(...)``.

    Raises:
        InvalidArgumentError: for non-positive depth or a pixel outside the image.
    """
    pixel = np.asarray(pixel, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    if np.any(~(depth > 0)):
        raise InvalidArgumentError("depth must be positive")
    u, v = pixel[..., 0], pixel[..., 1]
    if np.any((u < 0) | (u > K.width - 1) | (v < 0) | (v > K.height - 1)):
        raise InvalidArgumentError("pixel outside image bounds")
    return np.stack([(u - K.cx) * depth / K.fx, (v - K.cy) * depth / K.fy, depth * np.ones_like(u)], axis=-1)


def project(points, K: CameraIntrinsics, allow_behind: bool = False):
    """Project camera-frame point(s) to pixel coordinates.

    Returns:
        ``(pixels, depth)`` where pixels has shape ``(..., 2)``.  Pixels may
        fall outside the image; callers check bounds.

    Raises:
        BehindCameraError: if any ``z <= 0`` and ``allow_behind`` is False.
            With ``allow_behind`` such points map to NaN.
    """
    points = np.asarray(points, dtype=np.float64)
    z = points[..., 2]
    behind = ~(z > 0)
    if np.any(behind):
        if not allow_behind:
            raise BehindCameraError("point is behind the camera (z <= 0)")
        z = np.where(behind, np.nan, z)
    u = K.fx * points[..., 0] / z + K.cx
    v = K.fy * points[..., 1] / z + K.cy
    return np.stack([u, v], axis=-1), z


def pixel_grid(height: int, width: int) -> np.ndarray:
    """``(height, width, 2)`` array of ``(u, v)`` pixel-centre coordinates."""
    v, u = np.mgrid[0:height, 0:width].astype(np.float64)
    return np.stack([u, v], axis=-1)


def relative_pose(world_from_a: Pose, world_from_b: Pose) -> Pose:
    """Pose mapping frame-``a`` coordinates into frame-``b`` coordinates."""
    return compose(invert(world_from_b), world_from_a)
