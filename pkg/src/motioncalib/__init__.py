"""Targetless camera-LiDAR extrinsic calibration from sensor motion.

Convention: the extrinsic ``X = (R, t)`` maps LiDAR-frame coordinates into
the camera frame, ``p_c = R p_l + t``. Motions ``A`` (camera) and ``B``
(LiDAR) are the pose of the second sensor frame in the first, so
``A X = X B``.
"""

from .errors import CalibrationError
from .geometry import CameraModel, PointCloud, RigidMotion, ScaledMotion, compose, invert
from .handeye import Extrinsic, MotionPair, calibrate
from .pipeline import CalibrationConfig, CalibrationReport, motion_advisor, predicted_projection_error, run_calibration
from .synthetic import NoiseSpec, SceneSpec, TrajectorySpec, evaluate_extrinsic, generate_scene, simulate_dataset

__version__ = "0.1.0"

__all__ = [
    "CalibrationConfig",
    "CalibrationError",
    "CalibrationReport",
    "CameraModel",
    "Extrinsic",
    "MotionPair",
    "NoiseSpec",
    "PointCloud",
    "RigidMotion",
    "ScaledMotion",
    "SceneSpec",
    "TrajectorySpec",
    "calibrate",
    "compose",
    "evaluate_extrinsic",
    "generate_scene",
    "invert",
    "motion_advisor",
    "predicted_projection_error",
    "run_calibration",
    "simulate_dataset",
]
