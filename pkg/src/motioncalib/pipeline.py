"""Alternating calibration loop and motion-quality diagnostics.

Iteration 0 is a scaleless hand-eye solve on odometry alone. Every later
iteration re-estimates metric camera motions against the LiDAR scans using
the current extrinsic, then re-solves the hand-eye problem with those scales.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .cam_odom import RansacParams, estimate_camera_motion
from .errors import (
    CalibrationError,
    DegenerateAxes,
    DegenerateGeometry,
    DivergenceDetected,
    InitializationFailed,
    InsufficientPairs,
    RankDeficient,
)
from .fusion import FusionParams, reestimate_all_motions
from .geometry import RigidMotion, motion_difference, rotation_angle
from .handeye import Extrinsic, MotionPair, calibrate
from .lidar_odom import IcpParams, icp_align

log = logging.getLogger(__name__)

WEAK_ROTATION = "WEAK_ROTATION"
LARGE_BASELINE = "LARGE_BASELINE"


@dataclass(frozen=True)
class AdvisorParams:
    # engineering defaults; nothing upstream fixes these numbers
    weak_rotation: float = float(np.radians(5.0))
    large_baseline: float = 1.0
    drop_flagged: bool = False


@dataclass(frozen=True)
class CalibrationConfig:
    max_outer_iterations: int = 20
    rotation_eps: float = 1e-5
    translation_eps: float = 1e-5
    divergence_patience: int = 3
    divergence_tolerance: float = 0.1  # relative growth that counts as an increase
    icp: IcpParams = IcpParams()
    ransac: RansacParams = RansacParams()
    fusion: FusionParams = FusionParams()
    advisor: AdvisorParams = AdvisorParams()
    seed: int = 0

    def __post_init__(self):
        if self.rotation_eps <= 0 or self.translation_eps <= 0:
            raise ValueError("convergence thresholds must be positive")
        if self.max_outer_iterations < 0:
            raise ValueError("max_outer_iterations must be >= 0")


@dataclass(frozen=True)
class MotionDiagnostic:
    pair_id: str
    rotation_angle: float
    propagation_gain: float
    translation_magnitude: float
    flags: tuple = ()


@dataclass(frozen=True)
class IterationRecord:
    iteration: int
    extrinsic: Extrinsic
    mean_residual: float  # mean angular (sine) residual of the scaled pose fits; NaN at iteration 0
    pair_count: int


@dataclass
class CalibrationReport:
    extrinsic: Extrinsic
    per_iteration: list
    motion_diagnostics: list
    status: str  # converged | max_iter | failed
    failures: dict = field(default_factory=dict)
    dataset_name: str = ""

    @property
    def initial(self) -> Extrinsic:
        return self.per_iteration[0].extrinsic


def propagation_gain(R):
    """Operator norm of ``I - R``: how much an extrinsic translation error leaks into a motion."""
    return float(np.linalg.norm(np.eye(3) - np.asarray(R), 2))


def motion_advisor(pairs, params: AdvisorParams = AdvisorParams()):
    """Per-pair rotation strength and baseline diagnostics.

    The translation magnitude is the metric camera baseline when the pair
    carries a scale, otherwise the LiDAR translation as a proxy.
    """
    out = []
    for p in pairs:
        angle = rotation_angle(p.camera.rotation)
        if p.camera.scale is not None:
            baseline = float(p.camera.scale)
        else:
            baseline = float(np.linalg.norm(p.lidar.translation))
        flags = []
        if angle < params.weak_rotation:
            flags.append(WEAK_ROTATION)
        if baseline > params.large_baseline:
            flags.append(LARGE_BASELINE)
        out.append(MotionDiagnostic(p.id, angle, propagation_gain(p.camera.rotation), baseline, tuple(flags)))
    return out


def predicted_projection_error(a, a_est, v, alpha, beta):
    """Sine of the angle between the true and predicted rays to a scene point.

    The point lies at ``beta * v`` seen from camera 1; camera 2 truly sits at
    ``a`` but is believed to sit at ``a_est`` while the depth is taken as
    ``alpha``. The cross product is expanded bilinearly so that the
    ``a_est = a`` case reduces to ``(alpha - beta) (a x v)`` term by term.
    """
    a, a_est, v = (np.asarray(x, dtype=float) for x in (a, a_est, v))
    n_true = np.linalg.norm(beta * v - a)
    n_est = np.linalg.norm(alpha * v - a_est)
    if n_true < 1e-15 or n_est < 1e-15:
        raise DegenerateGeometry("camera position coincides with the scene point")
    c = alpha * beta * np.cross(v, v) - beta * np.cross(v, a_est) - alpha * np.cross(a, v) + np.cross(a, a_est)
    return float(np.linalg.norm(c) / (n_true * n_est))


def projection_error_closed_form(a, v, alpha, beta):
    """``|(alpha - beta)(a x v)| / (|beta v - a| |alpha v - a|)``."""
    a, v = np.asarray(a, dtype=float), np.asarray(v, dtype=float)
    den = np.linalg.norm(beta * v - a) * np.linalg.norm(alpha * v - a)
    if den < 1e-30:
        raise DegenerateGeometry("camera position coincides with the scene point")
    return float(abs(alpha - beta) * np.linalg.norm(np.cross(a, v)) / den)


def lidar_motions(dataset, params: IcpParams = IcpParams()):
    """ICP motion per record (kept if given); returns ({id: motion}, {id: failure})."""
    motions, failures = {}, {}
    for rec in dataset.motions:
        if rec.lidar_motion is not None:
            motions[rec.id] = rec.lidar_motion
            continue
        if rec.scan_to is None:
            failures[rec.id] = "missing second scan"
            continue
        try:
            motions[rec.id] = icp_align(rec.scan_to, rec.scan_from, RigidMotion.identity(), params).motion
        except CalibrationError as exc:
            log.warning("LiDAR odometry failed for %s: %s", rec.id, exc)
            failures[rec.id] = f"{type(exc).__name__}: {exc}"
    return motions, failures


def camera_motions(dataset, params: RansacParams = RansacParams()):
    """Scaleless camera motion per record; returns ({id: ScaledMotion}, {id: failure})."""
    motions, failures = {}, {}
    for rec in dataset.motions:
        try:
            motions[rec.id] = estimate_camera_motion(rec.matches, params)
        except CalibrationError as exc:
            log.warning("camera odometry failed for %s: %s", rec.id, exc)
            failures[rec.id] = f"{type(exc).__name__}: {exc}"
    return motions, failures


def initial_pairs(dataset, config: CalibrationConfig = CalibrationConfig()):
    lid, f1 = lidar_motions(dataset, config.icp)
    cam, f2 = camera_motions(dataset, config.ransac)
    pairs = [MotionPair(cam[i], lid[i], i) for i in dataset.ids if i in lid and i in cam]
    return pairs, lid, {**f1, **f2}


def _changed(a: Extrinsic, b: Extrinsic):
    return motion_difference(a.transform, b.transform)


def run_calibration(dataset, config: CalibrationConfig = CalibrationConfig()) -> CalibrationReport:
    """Scaleless initialization followed by alternating fusion / hand-eye passes."""
    pairs, lid, failures = initial_pairs(dataset, config)
    diagnostics = motion_advisor(pairs, config.advisor)
    if config.advisor.drop_flagged:
        flagged = {d.pair_id for d in diagnostics if d.flags}
        pairs = [p for p in pairs if p.id not in flagged]
        failures.update({i: "dropped by motion advisor" for i in sorted(flagged)})
    try:
        X = calibrate(pairs, "scaleless")
    except (DegenerateAxes, InsufficientPairs, RankDeficient) as exc:
        raise InitializationFailed(f"scaleless initialization failed: {exc}") from exc
    history = [IterationRecord(0, X, float("nan"), len(pairs))]

    kept = [i for i in dataset.ids if i in {p.id for p in pairs}]
    data = dataset.select(kept).with_lidar_motions([lid[i] for i in kept])
    status = "max_iter"
    previous = None
    selections = None
    best = None
    increases = 0
    for k in range(1, config.max_outer_iterations + 1):
        fused = reestimate_all_motions(data, X, previous, config.fusion, selections)
        for mid, msg in fused.failures.items():
            failures[f"{mid}@{k}"] = msg
        previous = {p.id: p.camera.to_motion() for p in fused.pairs}
        selections = fused.selections
        try:
            X_new = calibrate(fused.pairs, "scaled")
        except CalibrationError as exc:
            log.error("scaled hand-eye failed at iteration %d: %s", k, exc)
            status = "failed"
            break
        rec = IterationRecord(k, X_new, fused.mean_residual, len(fused.pairs))
        history.append(rec)
        if best is None or rec.mean_residual < best.mean_residual:
            best = rec
        prev_res = history[-2].extrinsic.translation_residual if k > 1 else None
        if prev_res is not None and X_new.translation_residual > prev_res * (1 + config.divergence_tolerance) + 1e-12:
            increases += 1
        else:
            increases = 0
        d_rot, d_trans = _changed(X, X_new)
        X = X_new
        if increases >= config.divergence_patience:
            report = CalibrationReport(best.extrinsic, history, motion_advisor(fused.pairs, config.advisor), "failed", failures, dataset.name)
            raise DivergenceDetected(
                f"translation residual grew {increases} consecutive iterations; best iterate is {best.iteration}", report
            )
        if d_rot < config.rotation_eps and d_trans < config.translation_eps:
            status = "converged"
            diagnostics = motion_advisor(fused.pairs, config.advisor)
            break
        diagnostics = motion_advisor(fused.pairs, config.advisor)
    if config.max_outer_iterations == 0:
        status = "max_iter"
    final = X if status != "failed" else (best.extrinsic if best is not None else history[0].extrinsic)
    return CalibrationReport(final, history, diagnostics, status, failures, dataset.name)
