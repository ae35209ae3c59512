"""Deterministic ray-cast renderer for posed synthetic image sequences.

Scenes are built from textured primitives whose appearance is a function of
world position only, so every view of a surface point sees the same
intensity (Lambertian, fixed directional light).  Ground-truth depth is the
camera-frame ``z`` of the nearest hit.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import CameraIntrinsics, Pose, pixel_grid

N_SINUSOIDS = 8


@dataclass(frozen=True)
class Texture:
    """Sum of random-phase sinusoids over world coordinates, band-limited to
    wavelengths in ``[min_wavelength, max_wavelength]`` metres."""

    seed: int
    min_wavelength: float = 0.15
    max_wavelength: float = 0.8
    contrast: float = 0.4

    def _params(self):
        rng = np.random.default_rng(self.seed)
        dirs = rng.normal(size=(N_SINUSOIDS, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        wavelengths = rng.uniform(self.min_wavelength, self.max_wavelength, N_SINUSOIDS)
        phases = rng.uniform(0, 2 * np.pi, N_SINUSOIDS)
        amps = rng.uniform(0.5, 1.0, N_SINUSOIDS)
        amps *= self.contrast / amps.sum()
        return dirs / wavelengths[:, None], phases, amps

    def __call__(self, points: np.ndarray) -> np.ndarray:
        freqs, phases, amps = self._params()
        arg = 2 * np.pi * (points @ freqs.T) + phases
        return 0.5 + np.sin(arg) @ amps


@dataclass(frozen=True)
class FrontoPlane:
    """Plane ``z = depth`` in world coordinates, optionally bounded in x/y."""

    depth: float
    x_range: tuple = (-np.inf, np.inf)
    y_range: tuple = (-np.inf, np.inf)

    def intersect(self, origin, dirs):
        with np.errstate(divide="ignore", invalid="ignore"):
            s = (self.depth - origin[2]) / dirs[..., 2]
        hit = origin + s[..., None] * dirs
        ok = (s > 0) & np.isfinite(s)
        ok &= (hit[..., 0] >= self.x_range[0]) & (hit[..., 0] <= self.x_range[1])
        ok &= (hit[..., 1] >= self.y_range[0]) & (hit[..., 1] <= self.y_range[1])
        normal = np.broadcast_to(np.array([0.0, 0.0, -1.0]), dirs.shape)
        return np.where(ok, s, np.inf), normal


@dataclass(frozen=True)
class Sphere:
    center: tuple
    radius: float

    def intersect(self, origin, dirs):
        c = np.asarray(self.center, dtype=np.float64)
        oc = origin - c
        a = np.einsum("...i,...i->...", dirs, dirs)
        b = 2.0 * dirs @ oc
        cc = oc @ oc - self.radius**2
        disc = b * b - 4 * a * cc
        root = np.sqrt(np.maximum(disc, 0.0))
        s0 = (-b - root) / (2 * a)
        s1 = (-b + root) / (2 * a)
        s = np.where(s0 > 0, s0, s1)
        ok = (disc >= 0) & (s > 0)
        s = np.where(ok, s, np.inf)
        normal = origin + np.where(ok, s, 0.0)[..., None] * dirs - c
        normal /= self.radius
        return s, normal


@dataclass(frozen=True)
class SyntheticScene:
    """Primitives, a camera trajectory (world-from-camera poses) and
    rendering parameters.  Rendering is a pure function of these fields."""

    primitives: tuple
    trajectory: tuple
    intrinsics: CameraIntrinsics
    seed: int = 0
    background_depth: float = 10.0
    noise_sigma: float = 0.0
    light_direction: tuple = (0.3, -0.5, 1.0)  # direction the light travels
    ambient: float = 0.4
    texture_wavelengths: tuple = (0.15, 0.8)
    timestamps: tuple = field(default=())

    def timestamp(self, index: int) -> float:
        if self.timestamps:
            return float(self.timestamps[index])
        return index / 30.0

    def texture(self, primitive_index: int) -> Texture:
        lo, hi = self.texture_wavelengths
        return Texture(seed=self.seed * 1000 + primitive_index, min_wavelength=lo, max_wavelength=hi)


def render(scene: SyntheticScene, index: int):
    """Ray-cast frame ``index``.

    Returns:
        ``(image, depth, pose, valid)``: grayscale image in ``[0, 1]``, camera
        z-depth in metres (``background_depth`` where nothing was hit), the
        world-from-camera pose and the hit mask.
    """
    if not 0 <= index < len(scene.trajectory):
        raise IndexError(f"frame {index} outside trajectory of length {len(scene.trajectory)}")
    K = scene.intrinsics
    pose: Pose = scene.trajectory[index]
    pix = pixel_grid(K.height, K.width)
    rays_cam = np.stack(
        [(pix[..., 0] - K.cx) / K.fx, (pix[..., 1] - K.cy) / K.fy, np.ones(pix.shape[:2])], axis=-1
    )
    dirs = rays_cam @ pose.rotation.T
    origin = pose.translation

    best = np.full(pix.shape[:2], np.inf)
    owner = np.full(pix.shape[:2], -1)
    normals = np.zeros(pix.shape[:2] + (3,))
    for i, prim in enumerate(scene.primitives):
        s, n = prim.intersect(origin, dirs)
        closer = s < best
        best = np.where(closer, s, best)
        owner = np.where(closer, i, owner)
        normals = np.where(closer[..., None], n, normals)

    valid = np.isfinite(best)
    # rays_cam has unit z, so the ray parameter is the camera z-depth
    depth = np.where(valid, best, scene.background_depth)
    points = origin + np.where(valid, best, 0.0)[..., None] * dirs

    light = -np.asarray(scene.light_direction, dtype=np.float64)
    light /= np.linalg.norm(light)
    shade = scene.ambient + (1.0 - scene.ambient) * np.clip(normals @ light, 0.0, 1.0)
    image = np.zeros(pix.shape[:2])
    for i in range(len(scene.primitives)):
        sel = owner == i
        if sel.any():
            image[sel] = scene.texture(i)(points[sel]) * shade[sel]
    if scene.noise_sigma > 0:
        rng = np.random.default_rng([scene.seed, index, 7])
        image = image + rng.normal(0.0, scene.noise_sigma, image.shape)
    return np.clip(image, 0.0, 1.0), depth, pose, valid


def lateral_trajectory(n_frames: int, step: float, start=(0.0, 0.0, 0.0), axis: int = 0):
    """Cameras looking down +z, translated by ``step`` metres per frame along ``axis``."""
    poses = []
    for i in range(n_frames):
        t = np.array(start, dtype=np.float64)
        t[axis] += i * step
        poses.append(Pose(np.eye(3), t))
    return tuple(poses)


def default_intrinsics(width: int = 160, height: int = 120) -> CameraIntrinsics:
    f = 0.9375 * width
    return CameraIntrinsics(fx=f, fy=f, cx=(width - 1) / 2, cy=(height - 1) / 2, width=width, height=height)


def plane_scene(n_frames=5, depth=2.0, step=0.1, width=160, height=120, seed=0, noise_sigma=0.0):
    """Single textured fronto-parallel plane seen by a laterally moving camera."""
    traj = lateral_trajectory(n_frames, step, start=(-step * (n_frames - 1) / 2, 0.0, 0.0))
    return SyntheticScene(
        primitives=(FrontoPlane(depth),),
        trajectory=traj,
        intrinsics=default_intrinsics(width, height),
        seed=seed,
        noise_sigma=noise_sigma,
    )


def two_layer_scene(
    n_frames=15,
    near=1.5,
    far=3.0,
    step=0.04,
    half_width=0.35,
    width=160,
    height=120,
    seed=0,
    noise_sigma=0.0,
):
    """Foreground board in front of a background wall, camera sliding sideways.

    The board spans ``|x| <= half_width`` and all rows; lateral motion
    reveals background next to one of its vertical edges.
    """
    traj = lateral_trajectory(n_frames, step, start=(-step * (n_frames - 1) / 2, 0.0, 0.0))
    return SyntheticScene(
        primitives=(
            FrontoPlane(far),
            FrontoPlane(near, x_range=(-half_width, half_width)),
        ),
        trajectory=traj,
        intrinsics=default_intrinsics(width, height),
        seed=seed,
        noise_sigma=noise_sigma,
        texture_wavelengths=(0.1, 0.5),
    )


def objects_scene(n_frames=5, step=0.1, width=160, height=120, seed=0, noise_sigma=0.0):
    """Background wall with spheres at varying depth (well-conditioned for
    pose estimation)."""
    traj = lateral_trajectory(n_frames, step, start=(-step * (n_frames - 1) / 2, 0.0, 0.0))
    return SyntheticScene(
        primitives=(
            FrontoPlane(3.0),
            Sphere((-0.45, -0.2, 1.8), 0.35),
            Sphere((0.5, 0.25, 2.2), 0.45),
            Sphere((0.1, -0.1, 1.3), 0.15),
        ),
        trajectory=traj,
        intrinsics=default_intrinsics(width, height),
        seed=seed,
        noise_sigma=noise_sigma,
    )


SCENES = {"plane": plane_scene, "layered": two_layer_scene, "objects": objects_scene}
