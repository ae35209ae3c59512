"""Streaming multi-view depth estimation with depth probability volumes."""

from .dpv import DepthHypotheses, DepthProbabilityVolume, LogVolume, make_hypotheses
from .errors import DPVError
from .geometry import CameraIntrinsics, Pose
from .pipeline import PipelineConfig, run_stream

__all__ = [
    "CameraIntrinsics",
    "DPVError",
    "DepthHypotheses",
    "DepthProbabilityVolume",
    "LogVolume",
    "PipelineConfig",
    "Pose",
    "make_hypotheses",
    "run_stream",
]

__version__ = "0.1.0"
