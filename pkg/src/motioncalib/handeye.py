"""Hand-eye calibration ``A X = X B`` with unknown per-motion camera scale.

``X`` maps LiDAR coordinates into camera coordinates. A camera motion ``A``
is the pose of camera 2 expressed in the camera-1 frame (likewise ``B`` for
the LiDAR), so for a rigidly mounted pair ``A = X B X^-1``. Splitting the
product gives the rotation relation ``Ra R = R Rb`` and the translation
relation ``Ra t + s ta_hat = R tb + t`` used below.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateAxes, InsufficientPairs, NearIdentity, RankDeficient
from .geometry import (
    NEAR_IDENTITY_ANGLE,
    RigidMotion,
    ScaledMotion,
    exp_so3,
    rotation_angle,
    rotation_axis_angle,
)
from .lsq import COST_TOL, MAX_ITERATIONS, STEP_TOL, Refinement, inverse_norm_weights, levenberg_marquardt, sum_of_norms

log = logging.getLogger(__name__)

AXIS_CONDITION_MIN = 1e-3
SMALL_ROTATION = np.radians(0.5)

_GENERATORS = np.array(
    [
        [[0, 0, 0], [0, 0, -1], [0, 1, 0]],
        [[0, 0, 1], [0, 0, 0], [-1, 0, 0]],
        [[0, -1, 0], [1, 0, 0], [0, 0, 0]],
    ],
    dtype=float,
)


@dataclass(frozen=True, eq=False)
class MotionPair:
    camera: ScaledMotion
    lidar: RigidMotion
    id: str = ""

    @classmethod
    def from_motions(cls, camera: RigidMotion, lidar: RigidMotion, id="", keep_scale=True):
        return cls(ScaledMotion.from_motion(camera, keep_scale), lidar, id)

    @property
    def camera_angle(self):
        return rotation_angle(self.camera.rotation)

    @property
    def lidar_angle(self):
        return rotation_angle(self.lidar.rotation)


@dataclass(frozen=True, eq=False)
class Extrinsic:
    transform: RigidMotion
    scales: tuple = ()
    pair_ids: tuple = ()
    rotation_residual: float = 0.0
    translation_residual: float = 0.0
    condition: float = 0.0
    flags: tuple = ()
    converged: bool = True

    @property
    def rotation(self):
        return self.transform.rotation

    @property
    def translation(self):
        return self.transform.translation


def usable_pairs(pairs, min_angle=NEAR_IDENTITY_ANGLE):
    """Pairs whose camera and LiDAR rotations both define an axis."""
    out = [p for p in pairs if min(p.camera_angle, p.lidar_angle) >= min_angle]
    if len(out) < len(pairs):
        log.warning("ignoring %d near-identity motion pair(s)", len(pairs) - len(out))
    return out


def rotation_weights(pairs):
    """Per-pair weight, linearly reduced below half a degree of rotation."""
    angles = np.array([min(p.camera_angle, p.lidar_angle) for p in pairs])
    return np.minimum(1.0, angles / SMALL_ROTATION)


def _axes(pairs):
    ka, kb = [], []
    for p in pairs:
        ka.append(rotation_axis_angle(p.camera.rotation).axis)
        kb.append(rotation_axis_angle(p.lidar.rotation).axis)
    return np.array(ka), np.array(kb)


def axis_singular_values(pairs):
    ka, kb = _axes(pairs)
    w = rotation_weights(pairs)
    M = (w[:, None, None] * ka[:, :, None] * kb[:, None, :]).sum(axis=0) / w.sum()
    return np.linalg.svd(M, compute_uv=False)


def solve_rotation_linear(pairs):
    """Procrustes fit of ``ka = R kb`` over the rotation axes."""
    if len(pairs) < 2:
        raise InsufficientPairs(f"need at least 2 motion pairs, got {len(pairs)}")
    try:
        ka, kb = _axes(pairs)
    except NearIdentity as exc:
        raise InsufficientPairs(f"near-identity pair passed to rotation solver: {exc}") from exc
    w = rotation_weights(pairs)
    M = (w[:, None, None] * ka[:, :, None] * kb[:, None, :]).sum(axis=0) / w.sum()
    U, s, Vt = np.linalg.svd(M)
    if s[1] <= AXIS_CONDITION_MIN:
        raise DegenerateAxes(
            f"rotation axes span less than two directions (singular values {np.round(s, 6).tolist()})"
        )
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    return U @ D @ Vt


def _rotation_residuals(pairs, w):
    Ra = np.array([p.camera.rotation for p in pairs])
    Rb = np.array([p.lidar.rotation for p in pairs])

    def residual(R):
        return (w[:, None, None] * (Ra @ R - R @ Rb)).reshape(len(pairs), 9)

    def jacobian(R, _res):
        cols = []
        for G in _GENERATORS:
            dG = R @ G
            cols.append((w[:, None, None] * (Ra @ dG - dG @ Rb)).ravel())
        return np.column_stack(cols)

    return residual, jacobian


def rotation_cost(pairs, R):
    residual, _ = _rotation_residuals(pairs, rotation_weights(pairs))
    return sum_of_norms(residual(R))


def refine_rotation(pairs, r0, max_iterations=MAX_ITERATIONS) -> Refinement:
    """Minimize the summed Frobenius norms of ``Ra R - R Rb``."""
    residual, jacobian = _rotation_residuals(pairs, rotation_weights(pairs))
    result = levenberg_marquardt(
        residual,
        np.asarray(r0, dtype=float),
        lambda R, d: R @ exp_so3(d),
        3,
        cost_fn=sum_of_norms,
        weight_fn=inverse_norm_weights,
        jacobian_fn=jacobian,
        max_iterations=max_iterations,
    )
    if not result.converged:
        log.warning("rotation refinement stopped after %d iterations", result.iterations)
    return result


def _unknown_names(pairs):
    return ["t_x", "t_y", "t_z"] + [f"s[{p.id or i}]" for i, p in enumerate(pairs)]


def _check_rank(A, names):
    s = np.linalg.svd(A, compute_uv=False)
    tol = 1e-9 * max(s[0], 1e-300)
    rank = int((s > tol).sum())
    if rank < A.shape[1]:
        _, _, Vt = np.linalg.svd(A)
        null = Vt[rank:]
        weight = (null**2).sum(axis=0)
        bad = [n for n, wgt in zip(names, weight) if wgt > 1e-6]
        raise RankDeficient(
            f"translation system has rank {rank} < {A.shape[1]}; unobservable: {', '.join(bad)}", bad
        )


def solve_translation_scales(pairs, R):
    """Linear least squares for ``t`` and the per-pair camera scales.

    Pairs whose camera translation is zero carry no scale information; their
    scale is returned as 0 and left for the caller to flag.
    """
    n = len(pairs)
    if n < 2:
        raise InsufficientPairs(f"need at least 2 motion pairs, got {n}")
    A = np.zeros((3 * n, 3 + n))
    b = np.zeros(3 * n)
    has_dir = np.zeros(n, dtype=bool)
    for i, p in enumerate(pairs):
        rows = slice(3 * i, 3 * i + 3)
        A[rows, :3] = p.camera.rotation - np.eye(3)
        A[rows, 3 + i] = p.camera.direction
        b[rows] = R @ p.lidar.translation
        has_dir[i] = np.linalg.norm(p.camera.direction) > 0
    cols = np.r_[np.ones(3, dtype=bool), has_dir]
    names = [nm for nm, keep in zip(_unknown_names(pairs), cols) if keep]
    A = A[:, cols]
    _check_rank(A, names)
    sol = np.linalg.lstsq(A, b, rcond=None)[0]
    scales = np.zeros(n)
    scales[has_dir] = sol[3:]
    return sol[:3], scales


def solve_translation_linear(pairs, R):
    """Least squares ``(Ra - I) t = R tb - ta`` for metric camera motions."""
    A = np.vstack([p.camera.rotation - np.eye(3) for p in pairs])
    b = np.concatenate([R @ p.lidar.translation - p.camera.to_motion().translation for p in pairs])
    _check_rank(A, ["t_x", "t_y", "t_z"])
    return np.linalg.lstsq(A, b, rcond=None)[0]


def translation_residuals(pairs, R, t):
    """Per-pair ``(Ra t + ta) - (R tb + t)`` for metric camera motions."""
    return np.array(
        [
            p.camera.rotation @ t + p.camera.to_motion().translation - R @ p.lidar.translation - t
            for p in pairs
        ]
    )


def refine_translation(
    pairs, R, t0, max_iterations=MAX_ITERATIONS, step_tol=STEP_TOL, cost_tol=COST_TOL
) -> Refinement:
    """Minimize the sum of (unsquared) translation residual norms by IRLS."""
    if any(p.camera.scale is None for p in pairs):
        raise ValueError("refine_translation needs scaled camera motions")
    A = np.array([p.camera.rotation - np.eye(3) for p in pairs])
    b = np.array([R @ p.lidar.translation - p.camera.to_motion().translation for p in pairs])

    def residuals(t):
        return A @ t - b

    t = np.asarray(t0, dtype=float)
    res = residuals(t)
    costs = [sum_of_norms(res)]
    converged = False
    it = 0
    while it < max_iterations:
        if costs[-1] == 0.0:
            converged = True
            break
        it += 1
        w = inverse_norm_weights(res)
        H = np.einsum("i,ija,ijb->ab", w, A, A)
        g = np.einsum("i,ija,ij->a", w, A, b)
        t_new = np.linalg.solve(H, g)
        res_new = residuals(t_new)
        cost_new = sum_of_norms(res_new)
        if not cost_new < costs[-1]:
            converged = True
            break
        step = np.linalg.norm(t_new - t)
        drop = costs[-1] - cost_new
        t, res = t_new, res_new
        costs.append(cost_new)
        if step < step_tol or drop <= cost_tol * costs[-2]:
            converged = True
            break
    if not converged:
        log.warning("translation refinement stopped after %d iterations", it)
    return Refinement(t, converged, it, costs)


def rotation_residual(pairs, R):
    """Mean angle (radians) between ``Ra R`` and ``R Rb``."""
    return float(np.mean([rotation_angle((R @ p.lidar.rotation).T @ p.camera.rotation @ R) for p in pairs]))


def calibrate(pairs, mode="scaleless") -> Extrinsic:
    """Estimate the LiDAR-to-camera extrinsic from motion pairs.

    ``scaleless`` recovers ``t`` jointly with one scale per camera motion;
    ``scaled`` expects metric camera motions and refines ``t`` robustly.
    """
    if mode not in ("scaleless", "scaled"):
        raise ValueError(f"unknown mode {mode!r}")
    pairs = usable_pairs(list(pairs))
    if len(pairs) < 2:
        raise InsufficientPairs(f"need at least 2 usable motion pairs, got {len(pairs)}")
    R0 = solve_rotation_linear(pairs)
    rot = refine_rotation(pairs, R0)
    R = rot.value
    flags = []
    converged = rot.converged
    if mode == "scaleless":
        t, scales = solve_translation_scales(pairs, R)
        for p, s in zip(pairs, scales):
            if not s > 0:
                flags.append(f"scale_unresolved:{p.id}")
        res = np.array(
            [
                p.camera.rotation @ t + s * p.camera.direction - R @ p.lidar.translation - t
                for p, s in zip(pairs, scales)
            ]
        )
    else:
        t0 = solve_translation_linear(pairs, R)
        tr = refine_translation(pairs, R, t0)
        t = tr.value
        converged = converged and tr.converged
        scales = np.array([p.camera.scale for p in pairs])
        res = translation_residuals(pairs, R, t)
    if not converged:
        flags.append("no_convergence")
    sv = axis_singular_values(pairs)
    return Extrinsic(
        transform=RigidMotion(R, t),
        scales=tuple(float(s) for s in scales),
        pair_ids=tuple(p.id for p in pairs),
        rotation_residual=rotation_residual(pairs, R),
        translation_residual=float(np.sqrt(np.mean(np.sum(res**2, axis=1)))),
        condition=float(sv[1]),
        flags=tuple(flags),
        converged=converged,
    )
