"""Radar-camera extrinsic refinement: SE(3) tools, radar density maps,
differentiable splatting, a cross-modal refiner and a synthetic harness."""

from .geometry import (
    CameraIntrinsics,
    ExtrinsicTransform,
    IllConditionedLogError,
    gated_update,
    pose_errors,
    se3_exp,
    se3_log,
)
from .radar_density import DensityParams, GridSpec, RadarDetection, build_density
from .projection import MapSpec, alignment_loss, splat_jacobian

__version__ = "0.1.0"

__all__ = [
    "CameraIntrinsics",
    "DensityParams",
    "ExtrinsicTransform",
    "GridSpec",
    "IllConditionedLogError",
    "MapSpec",
    "RadarDetection",
    "alignment_loss",
    "build_density",
    "gated_update",
    "pose_errors",
    "se3_exp",
    "se3_log",
    "splat_jacobian",
]
