"""Streaming driver: slide a five-frame window over a sequence and fuse.

For every reference frame the driver optionally refines the window poses
against the predicted belief, measures a volume by plane sweep, fuses it
into the running belief, optionally upsamples it, and writes depth and
confidence maps plus a JSON-lines log.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import dpv as dpv_mod
from . import io
from .errors import ConfigError, DataError, DegenerateProblemError, DPVError, InvalidArgumentError
from .evaluation import DepthMetrics, aggregate, compute_metrics, scale_normalize, valid_mask
from .fusion import FilterState, GainConfig, predict, step
from .geometry import relative_pose
from .plane_sweep import FrameWindow, block_mean, measure_dpv
from .pose_opt import PoseOptProblem, optimize_window_poses
from .refine import GuidedUpsampleConfig, upsample_dpv

logger = logging.getLogger(__name__)

LOG_NAME = "frames.jsonl"
SUMMARY_NAME = "summary.json"
METRICS_NAME = "metrics.txt"


@dataclass
class PipelineConfig:
    """All tunable parameters of a run.

    ``delta_t`` is the frame spacing inside a window (sources at
    ``t +- delta_t`` and ``t +- 2 delta_t``); ``stride`` is the step between
    consecutive reference frames and defaults to ``delta_t``.
    """

    d_min: float = 0.5
    d_max: float = 10.0
    num_hypotheses: int = 64
    temperature: float | None = None
    smooth_cost: bool = True
    fusion_mode: str = "adaptive"
    damping: float = 0.8
    kappa: float = 2.0
    min_gain: float = 0.2
    refine: bool = False
    spatial_sigma: float = 4.0
    range_sigma: float = 0.1
    radius: float = 8.0
    pose_refine: bool = False
    pose_levels: int = 3
    huber_delta: float = 0.1
    pose_max_iterations: int = 20
    pose_tolerance: float = 1e-6
    pose_loss: str = "huber"
    mask_threshold: float = 0.0
    delta_t: int = 5
    stride: int | None = None
    strict: bool = False
    seed: int = 0
    output_dir: str = "out"
    eval_min_depth: float = 0.0
    eval_max_depth: float = math.inf
    scale_normalize: bool = True

    def __post_init__(self):
        self.validate()

    @property
    def window_stride(self) -> int:
        return self.delta_t if self.stride is None else self.stride

    def validate(self) -> None:
        """Raise :class:`ConfigError` on any out-of-range value."""
        try:
            self.hypotheses()
            self.gain_config()
            self.upsample_config()
        except InvalidArgumentError as exc:
            raise ConfigError(str(exc)) from None
        if self.temperature is not None and not self.temperature > 0:
            raise ConfigError(f"temperature must be positive, got {self.temperature}")
        if int(self.delta_t) != self.delta_t or self.delta_t < 1:
            raise ConfigError(f"delta_t must be a positive integer, got {self.delta_t}")
        if self.stride is not None and (int(self.stride) != self.stride or self.stride < 1):
            raise ConfigError(f"stride must be a positive integer, got {self.stride}")
        if not 0.0 <= self.mask_threshold <= 1.0:
            raise ConfigError(f"mask_threshold must be in [0, 1], got {self.mask_threshold}")
        if self.pose_loss not in ("huber", "l1"):
            raise ConfigError(f"pose_loss must be 'huber' or 'l1', got {self.pose_loss!r}")
        if self.pose_levels < 1 or self.pose_max_iterations < 1 or not self.huber_delta > 0:
            raise ConfigError("pose refinement needs levels >= 1, iterations >= 1 and a positive huber_delta")

    def hypotheses(self):
        return dpv_mod.make_hypotheses(self.d_min, self.d_max, self.num_hypotheses)

    def gain_config(self) -> GainConfig:
        return GainConfig(self.fusion_mode, self.damping, self.kappa, self.min_gain)

    def upsample_config(self) -> GuidedUpsampleConfig:
        return GuidedUpsampleConfig(self.spatial_sigma, self.range_sigma, self.radius)

    @classmethod
    def field_names(cls):
        return [f.name for f in dataclasses.fields(cls)]

    @classmethod
    def from_dict(cls, values: dict) -> "PipelineConfig":
        unknown = sorted(set(values) - set(cls.field_names()))
        if unknown:
            raise ConfigError(f"unknown configuration keys: {', '.join(unknown)}")
        try:
            return cls(**values)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def from_file(cls, path, overrides: dict | None = None) -> "PipelineConfig":
        """JSON object of fields; ``overrides`` take precedence."""
        try:
            values = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        if not isinstance(values, dict):
            raise ConfigError(f"config {path} must hold a JSON object")
        values.update(overrides or {})
        return cls.from_dict(values)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def reference_indices(n_frames: int, config: PipelineConfig) -> list[int]:
    """Reference frames whose full window lies inside the sequence.

    Raises:
        ConfigError: if the sequence cannot hold a single window.
    """
    span = 2 * config.delta_t
    if n_frames < 2 * span + 1:
        raise ConfigError(
            f"window requires 5 frames spaced by delta_t={config.delta_t} ({2 * span + 1} frames), "
            f"sequence has {n_frames}"
        )
    return list(range(span, n_frames - span, config.window_stride))


class _ImageCache:
    def __init__(self, manifest):
        self.manifest = manifest
        self.images = {}

    def get(self, i):
        if i not in self.images:
            self.images[i] = self.manifest.image(i)
        return self.images[i]

    def drop_before(self, i):
        for k in [k for k in self.images if k < i]:
            del self.images[k]


def make_window(manifest: io.SequenceManifest, ref: int, delta_t: int, images=None) -> FrameWindow:
    """Window around frame ``ref`` with poses taken from the manifest."""
    get = images.get if images is not None else manifest.image
    offsets = (-2 * delta_t, -delta_t, delta_t, 2 * delta_t)
    if ref + offsets[0] < 0 or ref + offsets[-1] >= len(manifest):
        raise ConfigError(f"window requires 5 frames; reference {ref} is too close to the sequence ends")
    ref_pose = manifest.poses[ref]
    return FrameWindow(
        reference=get(ref),
        sources=tuple(get(ref + o) for o in offsets),
        relative_poses=tuple(relative_pose(manifest.poses[ref + o], ref_pose) for o in offsets),
        intrinsics=manifest.intrinsics,
        reference_timestamp=manifest.frames[ref].timestamp,
        offsets=offsets,
        reference_pose=ref_pose,
    )


def refine_window_poses(window: FrameWindow, depth, conf, config: PipelineConfig):
    """Photometric refinement of the window poses against a reference depth map."""
    problem = PoseOptProblem(
        reference=window.reference,
        sources=window.sources,
        depth=depth,
        confidence=conf,
        initial_poses=window.relative_poses,
        intrinsics=window.intrinsics,
        levels=config.pose_levels,
        huber_delta=config.huber_delta,
        max_iterations=config.pose_max_iterations,
        tolerance=config.pose_tolerance,
        loss=config.pose_loss,
    )
    return optimize_window_poses(problem)


def _pose_prior(state: FilterState, window: FrameWindow, config: PipelineConfig):
    """Depth and confidence of the predicted belief at full resolution."""
    motion = relative_pose(state.pose, window.reference_pose)
    pred = predict(state.belief, motion, window.feature_intrinsics).to_dpv()
    up = upsample_dpv(pred, window.reference, config.upsample_config())
    depth, conf = dpv_mod.depth_and_confidence(up)
    return depth, conf


def downsample_ground_truth(gt: np.ndarray, shape) -> np.ndarray:
    """Bring ground truth to a prediction grid by integer block averaging.

    Blocks containing an invalid (0) pixel become invalid.
    """
    if gt.shape == tuple(shape):
        return gt
    factor = gt.shape[0] // shape[0]
    if factor < 1 or gt.shape[1] // factor != shape[1] or gt.shape[0] // factor != shape[0]:
        raise DataError(f"ground truth {gt.shape} cannot be matched to prediction {tuple(shape)}")
    mean = block_mean(gt, factor)
    full = block_mean((gt > 0).astype(np.float64), factor) == 1.0
    return np.where(full, mean, 0.0)


def evaluate_depth(pred: np.ndarray, gt: np.ndarray, config: PipelineConfig) -> DepthMetrics:
    gt = downsample_ground_truth(gt, pred.shape)
    mask = valid_mask(gt, pred, config.eval_min_depth, config.eval_max_depth)
    if config.scale_normalize:
        pred = scale_normalize(pred, gt, mask)
    return compute_metrics(pred, gt, mask)


@dataclass
class FrameOutput:
    index: int
    timestamp: float
    depth: np.ndarray
    confidence: np.ndarray
    record: dict
    metrics: DepthMetrics | None = None


@dataclass
class StreamResult:
    frames: list = field(default_factory=list)
    skipped: list = field(default_factory=list)
    summary: DepthMetrics | None = None


def json_safe(value):
    """JSON-safe copy (non-finite floats become strings)."""
    if isinstance(value, dict):
        return {k: json_safe(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [json_safe(v) for v in value]
    if isinstance(value, (np.floating, float)):
        v = float(value)
        return v if math.isfinite(v) else str(v)
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, np.bool_):
        return bool(value)
    return value


def process_frame(manifest, ref, state, config, images=None):
    """Run one reference frame.  Returns ``(new_state, depth, confidence, record)``."""
    hyps = config.hypotheses()
    window = make_window(manifest, ref, config.delta_t, images)
    record = {"frame": ref, "timestamp": manifest.frames[ref].timestamp}

    if config.pose_refine:
        if state is None:
            record["pose_refine"] = "skipped: no prior belief"
        else:
            prior_depth, prior_conf = _pose_prior(state, window, config)
            res = refine_window_poses(window, prior_depth, prior_conf, config)
            window = window.with_poses(res.poses)
            record.update(
                pose_initial_energy=res.initial_energy,
                pose_final_energy=res.final_energy,
                pose_iterations=res.iterations,
                pose_rank_deficient=res.rank_deficient,
            )

    meas = measure_dpv(window, hyps, config.temperature, config.smooth_cost)
    record["degenerate_pixels"] = int(meas.degenerate_pixels)
    new_state = step(state, window, config.gain_config(), hyps, measurement=meas)
    belief = new_state.belief.to_dpv()
    if config.refine:
        belief = upsample_dpv(belief, window.reference, config.upsample_config())
    depth, conf = dpv_mod.depth_and_confidence(belief)
    depth = dpv_mod.mask_low_confidence(depth, conf, config.mask_threshold)
    record["mean_confidence"] = float(conf.mean())
    return new_state, depth, conf, record


def _write_json_line(fh, record):
    fh.write(json.dumps(json_safe(record), sort_keys=True) + "\n")


def run_stream(manifest: io.SequenceManifest, config: PipelineConfig, write: bool = True) -> StreamResult:
    """Process every reference frame of ``manifest`` in order.

    Outputs under ``config.output_dir``: ``depth/NNNNNN.png``,
    ``confidence/NNNNNN.png``, the per-frame log ``frames.jsonl`` and, when
    ground truth is available, ``metrics.txt`` plus ``summary.json``.

    Raises:
        ConfigError: if the sequence is shorter than one window.
        DPVError: any frame failure when ``config.strict`` is set.
    """
    refs = reference_indices(len(manifest), config)
    out = Path(config.output_dir)
    if write:
        (out / "depth").mkdir(parents=True, exist_ok=True)
        (out / "confidence").mkdir(parents=True, exist_ok=True)
    images = _ImageCache(manifest)
    result = StreamResult()
    state = None
    log_fh = open(out / LOG_NAME, "w", encoding="utf-8") if write else None
    try:
        for ref in refs:
            images.drop_before(ref - 2 * config.delta_t)
            try:
                state, depth, conf, record = process_frame(manifest, ref, state, config, images)
                gt = manifest.ground_truth(ref)
                metrics = None
                if gt is not None:
                    try:
                        metrics = evaluate_depth(depth, gt, config)
                    except DegenerateProblemError as exc:
                        # nothing to score (e.g. everything masked); the outputs still stand
                        record["metrics_skipped"] = str(exc)
            except DPVError as exc:
                if config.strict:
                    raise
                logger.warning("frame %d skipped: %s", ref, exc)
                record = {"frame": ref, "timestamp": manifest.frames[ref].timestamp, "status": "skipped", "reason": str(exc)}
                result.skipped.append(ref)
                if log_fh:
                    _write_json_line(log_fh, record)
                continue
            record["status"] = "ok"
            if metrics is not None:
                record["metrics"] = metrics.as_dict()
            if write:
                name = f"{ref:06d}.png"
                record["saturated_pixels"] = io.write_depth(depth, out / "depth" / name)
                io.write_confidence(conf, out / "confidence" / name)
                _write_json_line(log_fh, record)
            result.frames.append(FrameOutput(ref, manifest.frames[ref].timestamp, depth, conf, record, metrics))
    finally:
        if log_fh:
            log_fh.close()

    scored = [f.metrics for f in result.frames if f.metrics is not None]
    if scored:
        result.summary = aggregate(scored)
    if write:
        summary = {
            "frames": len(result.frames),
            "skipped": result.skipped,
            # output_dir is left out so runs into different directories match byte for byte
            "config": {k: v for k, v in config.to_dict().items() if k != "output_dir"},
            "metrics": result.summary.as_dict() if result.summary else None,
        }
        (out / SUMMARY_NAME).write_text(json.dumps(json_safe(summary), sort_keys=True, indent=2) + "\n", encoding="utf-8")
        if result.summary:
            (out / METRICS_NAME).write_text(_metrics_text(result.summary, config), encoding="utf-8")
    return result


def _metrics_text(m: DepthMetrics, config: PipelineConfig) -> str:
    return (
        m.to_text()
        + f"\neval_min_depth: {config.eval_min_depth}\neval_max_depth: {config.eval_max_depth}\n"
    )


def run_window(manifest: io.SequenceManifest, ref: int, config: PipelineConfig):
    """Single-window measurement (no temporal fusion).  Returns ``(dpv, depth, confidence)``."""
    window = make_window(manifest, ref, config.delta_t)
    dpv = measure_dpv(window, config.hypotheses(), config.temperature, config.smooth_cost)
    if config.refine:
        dpv = upsample_dpv(dpv, window.reference, config.upsample_config())
    depth, conf = dpv_mod.depth_and_confidence(dpv)
    return dpv, dpv_mod.mask_low_confidence(depth, conf, config.mask_threshold), conf


def write_synthetic_dataset(scene, root) -> None:
    """Render every frame of ``scene`` into a sequence directory."""
    from .synthetic import render

    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "depth").mkdir(parents=True, exist_ok=True)
    lines, traj = [], []
    for i in range(len(scene.trajectory)):
        image, depth, pose, valid = render(scene, i)
        name = f"{i:06d}.png"
        io.write_image16(root / "images" / name, image)
        io.write_depth(np.where(valid, depth, 0.0), root / "depth" / name)
        t = scene.timestamp(i)
        lines.append(f"{t!r} images/{name} depth/{name}\n")
        traj.append(io.TimedPose(t, pose))
    with open(root / "frames.txt", "w", encoding="utf-8") as fh:
        fh.write("# timestamp image ground_truth_depth\n")
        fh.writelines(lines)
    io.write_intrinsics(root / "intrinsics.txt", scene.intrinsics)
    io.write_trajectory(root / "groundtruth.txt", traj)
