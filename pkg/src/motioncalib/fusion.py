"""Range-aided (scaled) camera motion from 2D-3D correspondences.

With the current extrinsic ``X`` the first camera sits at ``X^-1`` in the
LiDAR-1 frame. Scan points are projected into image 1, tracked into image 2
and paired with the tracked bearing rays; the camera-1 -> camera-2 transform
is then fitted by minimizing the angular error ``|v' x normalize(Ra (X p) + ta)|``.
"""

from __future__ import annotations

import logging
import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import CalibrationError, DegenerateConfiguration, NoConsensus, NoVisiblePoints, TrackerFailure
from .geometry import CameraModel, PointCloud, RigidMotion, ScaledMotion, exp_so3
from .handeye import Extrinsic, MotionPair
from .lsq import Refinement, levenberg_marquardt

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class FusionParams:
    max_correspondences: int = 2000
    min_correspondences: int = 10
    p3p_iterations: int = 200
    p3p_threshold: float = float(np.radians(1.0))
    huber_factor: float = 3.0
    seed: int = 0


@dataclass(frozen=True, eq=False)
class Correspondences:
    """World points and the unit rays they were tracked to in camera 2."""

    points: np.ndarray
    rays: np.ndarray
    quality: np.ndarray | None = None
    index: np.ndarray | None = None  # cloud indices of the points, when built from a cloud

    def __post_init__(self):
        p = np.asarray(self.points, dtype=float).reshape(-1, 3)
        r = np.asarray(self.rays, dtype=float).reshape(-1, 3)
        r = r / np.linalg.norm(r, axis=1, keepdims=True)
        q = np.ones(len(p)) if self.quality is None else np.asarray(self.quality, dtype=float)
        i = np.arange(len(p)) if self.index is None else np.asarray(self.index, dtype=int)
        object.__setattr__(self, "points", p)
        object.__setattr__(self, "rays", r)
        object.__setattr__(self, "quality", q)
        object.__setattr__(self, "index", i)

    def __len__(self):
        return len(self.points)

    def subset(self, index):
        return Correspondences(self.points[index], self.rays[index], self.quality[index], self.index[index])


def _transform(extrinsic):
    return extrinsic.transform if isinstance(extrinsic, Extrinsic) else extrinsic


def angular_residuals(rays, points_c):
    """``|v' x u|`` (sine of the angle) between observed rays and directions to points."""
    u = points_c / np.linalg.norm(points_c, axis=1, keepdims=True)
    return np.linalg.norm(np.cross(rays, u), axis=1)


def _stratified(pixels, camera, cap, cells=(64, 32)):
    """Indices of at most ``cap`` pixels spread evenly over a coarse image grid."""
    n = len(pixels)
    if n <= cap:
        return np.arange(n)
    cu = np.clip((pixels[:, 0] / camera.width * cells[0]).astype(int), 0, cells[0] - 1)
    cv = np.clip((pixels[:, 1] / camera.height * cells[1]).astype(int), 0, cells[1] - 1)
    cell = cv * cells[0] + cu
    order = np.argsort(cell, kind="stable")
    sorted_cell = cell[order]
    start = np.r_[0, np.flatnonzero(np.diff(sorted_cell)) + 1]
    rank = np.arange(n) - np.repeat(start, np.diff(np.r_[start, n]))
    rank_of = np.empty(n, dtype=int)
    rank_of[order] = rank
    pick = np.lexsort((np.arange(n), rank_of))[:cap]
    return np.sort(pick)


def build_correspondences(
    cloud: PointCloud,
    extrinsic,
    tracker,
    camera: CameraModel,
    lidar_pose_world: RigidMotion | None = None,
    params: FusionParams = FusionParams(),
    indices=None,
) -> Correspondences:
    """Project the cloud into camera 1, track into camera 2, pair points with rays.

    ``lidar_pose_world`` is the pose of LiDAR 1 in the cloud's frame (identity
    when the cloud is the LiDAR-1 scan itself). Hidden points are removed with
    a per-pixel z-buffer. Passing ``indices`` skips visibility and subsampling
    and re-tracks exactly those cloud points.
    """
    X = _transform(extrinsic)
    if lidar_pose_world is not None:
        X = X @ lidar_pose_world.inverse()
    pts = cloud.points
    if len(pts) == 0:
        raise NoVisiblePoints("empty point cloud")
    pc = X.apply(pts)
    px, _, valid = camera.project_many(pc)
    valid &= camera.in_image(px)
    if indices is not None:
        idx = np.asarray(indices, dtype=int)
        idx = idx[valid[idx]]
    else:
        idx = _visible(px, pc, valid, camera, params.max_correspondences)
    if len(idx) == 0:
        raise NoVisiblePoints("no cloud point projects into the image")
    px2, ok = tracker.track(px[idx])
    if ok.sum() < params.min_correspondences:
        raise TrackerFailure(f"only {int(ok.sum())} of {len(idx)} points tracked (< {params.min_correspondences})")
    return Correspondences(pts[idx[ok]], camera.unproject_many(px2[ok]), index=idx[ok])


def _visible(px, pc, valid, camera, cap):
    """Z-buffered, stratified subset of the valid projections."""
    idx = np.flatnonzero(valid)
    if len(idx) == 0:
        return idx
    depth = np.linalg.norm(pc[idx], axis=1)
    key = np.floor(px[idx, 1]).astype(np.int64) * camera.width + np.floor(px[idx, 0]).astype(np.int64)
    order = np.lexsort((depth, key))
    first = np.ones(len(order), dtype=bool)
    first[1:] = key[order][1:] != key[order][:-1]
    idx = np.sort(idx[order[first]])
    return idx[_stratified(px[idx], camera, cap)]


def _kabsch(P, Q):
    """R, t with Q ~ R P + t."""
    pc, qc = P.mean(0), Q.mean(0)
    H = (P - pc).T @ (Q - qc)
    U, _, Vt = np.linalg.svd(H)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(Vt.T @ U.T))])
    R = Vt.T @ D @ U.T
    return R, qc - R @ pc


def p3p(rays, points):
    """Central P3P (Grunert's quartic); returns candidate world-to-camera (R, t)."""
    f1, f2, f3 = rays
    P1, P2, P3 = points
    a2 = np.sum((P2 - P3) ** 2)
    b2 = np.sum((P1 - P3) ** 2)
    c2 = np.sum((P1 - P2) ** 2)
    ca, cb, cg = f2 @ f3, f1 @ f3, f1 @ f2
    if b2 == 0:
        return []
    amc = (a2 - c2) / b2
    apc = (a2 + c2) / b2
    A4 = (amc - 1) ** 2 - 4 * c2 / b2 * ca**2
    A3 = 4 * (amc * (1 - amc) * cb - (1 - apc) * ca * cg + 2 * c2 / b2 * ca**2 * cb)
    A2 = 2 * (amc**2 - 1 + 2 * amc**2 * cb**2 + 2 * (b2 - c2) / b2 * ca**2 - 4 * apc * ca * cb * cg + 2 * (b2 - a2) / b2 * cg**2)
    A1 = 4 * (-amc * (1 + amc) * cb + 2 * a2 / b2 * cg**2 * cb - (1 - apc) * ca * cg)
    A0 = (1 + amc) ** 2 - 4 * a2 / b2 * cg**2
    coeffs = np.array([A4, A3, A2, A1, A0])
    if not np.all(np.isfinite(coeffs)) or np.abs(coeffs).max() == 0:
        return []
    roots = np.roots(coeffs)
    out = []
    P = np.array([P1, P2, P3])
    for v in roots[np.abs(roots.imag) < 1e-8].real:
        den = 2 * (cg - v * ca)
        if abs(den) < 1e-14:
            continue
        u = ((-1 + amc) * v**2 - 2 * amc * cb * v + 1 + amc) / den
        q = 1 + v**2 - 2 * v * cb
        if q <= 0:
            continue
        s1 = np.sqrt(b2 / q)
        s = np.array([s1, u * s1, v * s1])
        if np.any(s <= 0):
            continue
        Q = s[:, None] * np.array([f1, f2, f3])
        out.append(_kabsch(P, Q))
    return out


def _collinear(P, tol=1e-9):
    d = P - P.mean(0)
    s = np.linalg.svd(d, compute_uv=False)
    return s[1] <= tol * max(s[0], 1e-300)


def _angle_errors(R, t, points, rays):
    pc = points @ R.T + t
    u = pc / np.linalg.norm(pc, axis=1, keepdims=True)
    return np.arctan2(np.linalg.norm(np.cross(rays, u), axis=1), (rays * u).sum(1))


def p3p_initialize(correspondences: Correspondences, seed=0, params: FusionParams = FusionParams()) -> RigidMotion:
    """RANSAC over P3P hypotheses; returns the camera-2 pose in the world frame."""
    P, F = correspondences.points, correspondences.rays
    n = len(P)
    if n >= 3 and _collinear(P):
        raise DegenerateConfiguration("all world points are collinear")
    if n < 4:
        raise ValueError(f"p3p_initialize needs at least 4 correspondences, got {n}")
    rng = np.random.default_rng(seed)
    scale = np.sqrt(((P - P.mean(0)) ** 2).sum(1).mean())
    best = (-1, None)
    tried = 0
    for _ in range(params.p3p_iterations):
        sample = rng.choice(n, 3, replace=False)
        S = P[sample]
        if np.linalg.norm(np.cross(S[1] - S[0], S[2] - S[0])) < 1e-6 * scale**2:
            continue
        tried += 1
        for R, t in p3p(F[sample], S):
            count = int((_angle_errors(R, t, P, F) < params.p3p_threshold).sum())
            if count > best[0]:
                best = (count, (R, t))
    if tried == 0:
        raise DegenerateConfiguration("every sampled triple was degenerate")
    if best[1] is None or best[0] < 4:
        raise NoConsensus(f"best P3P hypothesis has {max(best[0], 0)} inliers")
    R, t = best[1]
    inl = _angle_errors(R, t, P, F) < params.p3p_threshold
    polished = _refine_world_to_camera(P[inl], F[inl], RigidMotion(R, t), huber_factor=None)
    return polished.value.inverse()


def _huber(k):
    def cost(res):
        r = np.linalg.norm(res, axis=1)
        return float(np.sum(np.where(r <= k, 0.5 * r * r, k * (r - 0.5 * k))))

    def weights(res):
        r = np.linalg.norm(res, axis=1)
        return np.where(r <= k, 1.0, k / np.maximum(r, 1e-300))

    return cost, weights


def _pose_retract(T, d):
    return RigidMotion(exp_so3(d[:3]), d[3:]) @ T


def _refine_world_to_camera(points, rays, init: RigidMotion, huber_factor=3.0, max_iterations=100) -> Refinement:
    def residual(T):
        pc = T.apply(points)
        return np.cross(rays, pc / np.linalg.norm(pc, axis=1, keepdims=True))

    if huber_factor is None:
        cost_fn, weight_fn = (lambda res: 0.5 * float(np.sum(res * res))), None
    else:
        r0 = np.linalg.norm(residual(init), axis=1)
        k = max(huber_factor * float(np.median(r0)), 1e-12)
        cost_fn, weight_fn = _huber(k)
    return levenberg_marquardt(
        residual, init, _pose_retract, 6, cost_fn=cost_fn, weight_fn=weight_fn, max_iterations=max_iterations
    )


def refine_pose_angular(correspondences: Correspondences, extrinsic, init: RigidMotion, huber_factor=3.0) -> Refinement:
    """Angular refinement of a camera motion; value is the metric motion ``A``.

    ``init`` and the result use the hand-eye convention (camera-2 pose in the
    camera-1 frame); the optimized quantity is its inverse, the camera-1 ->
    camera-2 coordinate map applied to ``X p``.
    """
    X = _transform(extrinsic)
    q = X.apply(correspondences.points)
    result = _refine_world_to_camera(q, correspondences.rays, init.inverse(), huber_factor)
    if not result.converged:
        log.warning("pose refinement stopped after %d iterations", result.iterations)
    result.value = result.value.inverse()
    return result


@dataclass
class Reestimation:
    pairs: list
    mean_residuals: dict = field(default_factory=dict)
    failures: dict = field(default_factory=dict)
    selections: dict = field(default_factory=dict)  # id -> cloud indices used

    @property
    def mean_residual(self):
        vals = list(self.mean_residuals.values())
        return float(np.mean(vals)) if vals else float("nan")


def reestimate_motion(
    record, camera, extrinsic, previous: RigidMotion | None, params: FusionParams = FusionParams(), indices=None
):
    """Scaled camera motion for one dataset record; returns (motion, mean residual, cloud indices)."""
    X = _transform(extrinsic)
    corr = build_correspondences(record.scan_from, X, record.tracker, camera, params=params, indices=indices)
    if previous is None:
        seed = np.random.SeedSequence([params.seed, zlib.crc32(record.id.encode())])
        pose_c2 = p3p_initialize(corr, seed, params)
        previous = X @ pose_c2
    ref = refine_pose_angular(corr, X, previous, params.huber_factor)
    A = ref.value
    res = angular_residuals(corr.rays, (A.inverse() @ X).apply(corr.points))
    return A, float(np.mean(res)), corr.index


def reestimate_all_motions(
    dataset, extrinsic, previous=None, params: FusionParams = FusionParams(), selections=None
) -> Reestimation:
    """Re-estimate every camera motion with scale; failed motions are dropped.

    ``previous`` maps motion ids to the last estimates (initial guesses; P3P
    is used where missing). ``selections`` maps ids to the cloud points used
    last time, so later passes re-track the same points.
    """
    previous = previous or {}
    selections = selections or {}
    out = Reestimation([])
    for rec in dataset.motions:
        if rec.lidar_motion is None:
            raise ValueError(f"motion {rec.id} has no LiDAR motion")
        try:
            A, res, used = reestimate_motion(
                rec, dataset.camera, extrinsic, previous.get(rec.id), params, selections.get(rec.id)
            )
        except CalibrationError as exc:
            log.warning("dropping motion %s: %s", rec.id, exc)
            out.failures[rec.id] = f"{type(exc).__name__}: {exc}"
            continue
        out.pairs.append(MotionPair(ScaledMotion.from_motion(A), rec.lidar_motion, rec.id))
        out.mean_residuals[rec.id] = res
        out.selections[rec.id] = used
    return out
