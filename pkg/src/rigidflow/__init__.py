"""rigidflow: differentiable rigid-scene RGB-D dynamics.

Fits per-object rigid motions to unlabeled RGB-D frame pairs, predicts
future frames by transform-splat-inpaint composition, plans 3D servoing
actions with iCEM, and tunes its own loss weights with asynchronous
successive halving.
"""

__version__ = "0.1.0"

from .errors import (
    BehindCameraError,
    NumericalError,
    RigidflowError,
    ValidationError,
)
from .geometry import (
    CameraIntrinsics,
    FlowFields,
    MaskStack,
    PointCloud,
    RgbdFrame,
    RigidMotionSet,
    Se3,
    depth_to_pointcloud,
    occlusion_mask,
    optical_flow,
    project_point,
    scene_flow,
    se3_apply,
    se3_realize,
    transform_pointcloud,
)

__all__ = [
    "BehindCameraError",
    "CameraIntrinsics",
    "FlowFields",
    "MaskStack",
    "NumericalError",
    "PointCloud",
    "RgbdFrame",
    "RigidMotionSet",
    "RigidflowError",
    "Se3",
    "ValidationError",
    "depth_to_pointcloud",
    "occlusion_mask",
    "optical_flow",
    "project_point",
    "scene_flow",
    "se3_apply",
    "se3_realize",
    "transform_pointcloud",
]
