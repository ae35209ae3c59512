"""Dataset ingestion and output files.

A sequence directory holds:

* ``frames.txt``: one ``timestamp image_path [gt_depth_path]`` line per frame,
  paths relative to the directory, ``#`` comments allowed;
* ``intrinsics.txt``: ``key = value`` lines for fx, fy, cx, cy, width, height;
* ``groundtruth.txt``: TUM trajectory lines
  ``timestamp tx ty tz qx qy qz qw`` (world-from-camera).

Depth maps are 16-bit PNGs in millimetres with 0 marking invalid pixels;
confidence maps are 16-bit PNGs scaled by 65535.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DataError, InvalidArgumentError, ParseError
from .geometry import CameraIntrinsics, Pose

logger = logging.getLogger(__name__)

QUATERNION_TOLERANCE = 1e-3
DEPTH_SCALE = 1000.0  # stored units per metre
CONFIDENCE_SCALE = 65535.0
UINT16_MAX = 65535
INTRINSIC_KEYS = ("fx", "fy", "cx", "cy", "width", "height")


@dataclass(frozen=True, eq=False)
class TimedPose:
    timestamp: float
    pose: Pose


def _content_lines(path):
    with open(path, encoding="utf-8") as fh:
        for number, raw in enumerate(fh, start=1):
            line = raw.strip()
            if line and not line.startswith("#"):
                yield number, line


def parse_trajectory_line(line: str, line_number: int = 0) -> TimedPose:
    fields = line.split()
    if len(fields) != 8:
        raise ParseError(f"expected 8 fields (timestamp tx ty tz qx qy qz qw), got {len(fields)}", line_number)
    try:
        values = [float(f) for f in fields]
    except ValueError as exc:
        raise ParseError(f"non-numeric field: {exc}", line_number) from None
    if not all(math.isfinite(v) for v in values):
        raise ParseError("non-finite value", line_number)
    t, tx, ty, tz, *quat = values
    norm = float(np.linalg.norm(quat))
    if abs(norm - 1.0) > QUATERNION_TOLERANCE:
        raise InvalidArgumentError(f"line {line_number}: quaternion norm {norm:.6f} is not within {QUATERNION_TOLERANCE} of 1")
    return TimedPose(t, Pose.from_quaternion(np.asarray(quat) / norm, [tx, ty, tz]))


def load_trajectory(path) -> list[TimedPose]:
    """Read a TUM trajectory file.

    Raises:
        ParseError: on a malformed line (the message carries the line number).
        InvalidArgumentError: on a quaternion whose norm is off by more than 1e-3.
    """
    return [parse_trajectory_line(line, n) for n, line in _content_lines(path)]


def write_trajectory(path, entries) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# timestamp tx ty tz qx qy qz qw\n")
        for e in entries:
            q = e.pose.as_quaternion()
            vals = [e.timestamp, *e.pose.translation, *q]
            fh.write(" ".join(repr(float(v)) for v in vals) + "\n")


def load_intrinsics(path) -> CameraIntrinsics:
    """Read ``key = value`` (or ``key: value``) intrinsics.

    Raises:
        ParseError: on a line without a separator or a non-numeric value.
        DataError: ``missing key: <name>`` when a required key is absent.
    """
    values = {}
    for n, line in _content_lines(path):
        for sep in ("=", ":"):
            if sep in line:
                key, value = line.split(sep, 1)
                break
        else:
            raise ParseError(f"expected key = value, got {line!r}", n)
        try:
            values[key.strip()] = float(value)
        except ValueError:
            raise ParseError(f"non-numeric value for {key.strip()!r}", n) from None
    for key in INTRINSIC_KEYS:
        if key not in values:
            raise DataError(f"missing key: {key}")
    for key in ("width", "height"):
        if values[key] != int(values[key]):
            raise InvalidArgumentError(f"{key} must be an integer, got {values[key]}")
    return CameraIntrinsics(
        values["fx"], values["fy"], values["cx"], values["cy"], int(values["width"]), int(values["height"])
    )


def write_intrinsics(path, K: CameraIntrinsics) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for key in INTRINSIC_KEYS:
            fh.write(f"{key} = {getattr(K, key)!r}\n")


def load_image(path) -> np.ndarray:
    """Grayscale float image in ``[0, 1]`` (8- or 16-bit, colour converted to luma)."""
    try:
        with Image.open(path) as im:
            if im.mode in ("RGB", "RGBA", "P", "LA"):
                im = im.convert("RGB")
            arr = np.asarray(im)
    except OSError as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc
    if arr.dtype == np.uint8:
        img = arr / 255.0
    elif arr.dtype in (np.uint16, np.int32):
        img = arr / 65535.0
    else:
        img = arr.astype(np.float64)
    if img.ndim == 3:
        img = img[..., :3] @ np.array([0.299, 0.587, 0.114])
    return img.astype(np.float64)


def write_image16(path, image: np.ndarray) -> None:
    """Store an image in ``[0, 1]`` as a 16-bit grayscale PNG."""
    q = np.floor(np.clip(image, 0.0, 1.0) * 65535.0 + 0.5).astype(np.uint16)
    Image.fromarray(q).save(path)


def _quantize(values: np.ndarray, scale: float) -> np.ndarray:
    # round half up; the 6-decimal rounding absorbs binary representation error
    return np.floor(np.round(values * scale, 6) + 0.5)


def _write_sidecar(path: Path, scale: float, description: str) -> None:
    Path(str(path) + ".txt").write_text(
        f"scale = {scale!r}\nencoding = {description}\ninvalid = 0\n", encoding="utf-8"
    )


def write_depth(depth: np.ndarray, path) -> int:
    """Write a depth map (metres) as a 16-bit millimetre PNG plus sidecar.

    Non-finite and non-positive depths are stored as 0.  Depths beyond
    65.535 m saturate at 65535.

    Returns:
        Number of saturated pixels (a warning is logged when non-zero).
    """
    path = Path(path)
    depth = np.asarray(depth, dtype=np.float64)
    valid = np.isfinite(depth) & (depth > 0)
    q = _quantize(np.where(valid, depth, 0.0), DEPTH_SCALE)
    saturated = int(np.count_nonzero(valid & (q > UINT16_MAX)))
    q = np.clip(q, 0, UINT16_MAX).astype(np.uint16)
    if saturated:
        logger.warning("%s: %d depth values above %.3f m saturated", path, saturated, UINT16_MAX / DEPTH_SCALE)
    Image.fromarray(q).save(path)
    _write_sidecar(path, 1.0 / DEPTH_SCALE, "metres per unit, uint16 png")
    return saturated


def read_depth(path) -> np.ndarray:
    """Depth in metres from a 16-bit millimetre PNG (0 stays 0 = invalid)."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im)
    except OSError as exc:
        raise DataError(f"cannot read depth {path}: {exc}") from exc
    return arr.astype(np.float64) / DEPTH_SCALE


def write_confidence(conf: np.ndarray, path) -> None:
    """Write a confidence map in ``[0, 1]`` as a 16-bit PNG scaled by 65535."""
    path = Path(path)
    conf = np.asarray(conf, dtype=np.float64)
    if np.any(conf < 0) or np.any(conf > 1) or not np.all(np.isfinite(conf)):
        raise InvalidArgumentError("confidence must lie in [0, 1]")
    Image.fromarray(_quantize(conf, CONFIDENCE_SCALE).astype(np.uint16)).save(path)
    _write_sidecar(path, 1.0 / CONFIDENCE_SCALE, "confidence per unit, uint16 png")


def read_confidence(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im).astype(np.float64) / CONFIDENCE_SCALE


@dataclass(frozen=True)
class FrameRecord:
    timestamp: float
    image_path: Path
    depth_path: Path | None = None


@dataclass(frozen=True, eq=False)
class SequenceManifest:
    """Frames, intrinsics and associated poses of one sequence.

    Attributes:
        poses: world-from-camera pose of every frame, already associated.
    """

    frames: tuple
    intrinsics: CameraIntrinsics
    poses: tuple

    def __post_init__(self):
        ts = [f.timestamp for f in self.frames]
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise DataError("frame timestamps must be strictly increasing")
        if len(self.poses) != len(self.frames):
            raise DataError("one pose per frame is required")

    def __len__(self):
        return len(self.frames)

    @property
    def has_ground_truth(self) -> bool:
        return all(f.depth_path is not None for f in self.frames)

    def image(self, i: int) -> np.ndarray:
        img = load_image(self.frames[i].image_path)
        if img.shape != (self.intrinsics.height, self.intrinsics.width):
            raise DataError(f"{self.frames[i].image_path}: size {img.shape} does not match intrinsics")
        return img

    def ground_truth(self, i: int) -> np.ndarray | None:
        p = self.frames[i].depth_path
        return None if p is None else read_depth(p)


def load_frames(path) -> list[FrameRecord]:
    base = Path(path).parent
    frames = []
    for n, line in _content_lines(path):
        fields = line.split()
        if len(fields) not in (2, 3):
            raise ParseError(f"expected 'timestamp image [depth]', got {len(fields)} fields", n)
        try:
            t = float(fields[0])
        except ValueError:
            raise ParseError(f"bad timestamp {fields[0]!r}", n) from None
        depth = base / fields[2] if len(fields) == 3 else None
        frames.append(FrameRecord(t, base / fields[1], depth))
    return frames


def associate(frame_times, trajectory: list[TimedPose]) -> list[Pose]:
    """Nearest trajectory pose for every frame, within half the frame interval.

    Raises:
        DataError: if any frame has no pose within tolerance.
    """
    if not trajectory:
        raise DataError("trajectory is empty")
    frame_times = np.asarray(frame_times, dtype=np.float64)
    traj_t = np.array([e.timestamp for e in trajectory])
    order = np.argsort(traj_t, kind="stable")
    traj_t = traj_t[order]
    tol = 0.5 * float(np.median(np.diff(frame_times))) if len(frame_times) > 1 else np.inf
    poses = []
    for t in frame_times:
        j = int(np.searchsorted(traj_t, t))
        cands = [c for c in (j - 1, j) if 0 <= c < len(traj_t)]
        best = min(cands, key=lambda c: abs(traj_t[c] - t))
        if abs(traj_t[best] - t) > tol:
            raise DataError(f"no pose within {tol:.6g} s of frame at t={t!r}")
        poses.append(trajectory[order[best]].pose)
    return poses


def load_sequence(root) -> SequenceManifest:
    """Load ``frames.txt``, ``intrinsics.txt`` and ``groundtruth.txt`` from ``root``."""
    root = Path(root)
    for name in ("frames.txt", "intrinsics.txt", "groundtruth.txt"):
        if not (root / name).is_file():
            raise DataError(f"{root}: missing {name}")
    frames = load_frames(root / "frames.txt")
    if not frames:
        raise DataError(f"{root}: no frames listed")
    K = load_intrinsics(root / "intrinsics.txt")
    poses = associate([f.timestamp for f in frames], load_trajectory(root / "groundtruth.txt"))
    return SequenceManifest(tuple(frames), K, tuple(poses))
