"""Single-image-to-3D reconstruction core: trajectory planning, pointmap
registration, depth calibration and distortion-aware Gaussian splatting."""

from liftcore.core import (
    DepthMap,
    FrameStamp,
    GaussianCloud,
    Image,
    Intrinsics,
    PointMap,
    Pose,
    compose,
    inverse,
    matrix_to_quat,
    quat_to_matrix,
)

__version__ = "0.1.0"

__all__ = [
    "DepthMap",
    "FrameStamp",
    "GaussianCloud",
    "Image",
    "Intrinsics",
    "PointMap",
    "Pose",
    "compose",
    "inverse",
    "matrix_to_quat",
    "quat_to_matrix",
]
