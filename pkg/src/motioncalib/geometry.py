"""Rigid-body geometry, rotation parameterizations and camera ray models.

Conventions used throughout the package:

* rotations are 3x3 ``numpy`` arrays, angles are radians, lengths are meters;
* a :class:`RigidMotion` ``m`` acts on points as ``m.apply(p) = R p + t``;
  ``compose(a, b)`` applies ``b`` first, i.e. it is the 4x4 product ``a @ b``;
* quaternions are scalar-first ``(w, x, y, z)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy.spatial.transform import Rotation as _Rot

from .errors import BehindCamera, NearIdentity

NEAR_IDENTITY_ANGLE = 1e-6


def _frozen(a, shape=None, dtype=float):
    arr = np.array(a, dtype=dtype, copy=True)
    if shape is not None:
        arr = arr.reshape(shape)
    arr.setflags(write=False)
    return arr


def skew(v):
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def rot_x(angle):
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(angle):
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(angle):
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def exp_so3(rotvec):
    """Rotation matrix (or stack of them) from rotation vector(s)."""
    return _Rot.from_rotvec(rotvec).as_matrix()


def log_so3(R):
    return _Rot.from_matrix(R).as_rotvec()


def rotation_angle(R):
    """Angle of a rotation in [0, pi], accurate near both ends."""
    return float(_Rot.from_matrix(R).magnitude())


def orthonormalize(R):
    u, _, vt = np.linalg.svd(R)
    out = u @ vt
    if np.linalg.det(out) < 0:
        u[:, -1] *= -1
        out = u @ vt
    return out


def random_rotation(rng):
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    return _Rot.from_quat(q).as_matrix()


class AxisAngle(NamedTuple):
    axis: np.ndarray
    angle: float


def rotation_axis_angle(R, min_angle=NEAR_IDENTITY_ANGLE):
    rv = log_so3(R)
    angle = float(np.linalg.norm(rv))
    if angle < min_angle:
        raise NearIdentity(f"rotation angle {angle:.3g} rad is below {min_angle:g}")
    return AxisAngle(rv / angle, angle)


def from_axis_angle(axis, angle):
    axis = np.asarray(axis, dtype=float)
    return exp_so3(axis / np.linalg.norm(axis) * angle)


def to_quaternion(R):
    x, y, z, w = _Rot.from_matrix(R).as_quat()
    q = np.array([w, x, y, z])
    return q if w >= 0 else -q


def from_quaternion(q):
    w, x, y, z = q
    return _Rot.from_quat([x, y, z, w]).as_matrix()


@dataclass(frozen=True, eq=False)
class RigidMotion:
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "rotation", _frozen(self.rotation, (3, 3)))
        object.__setattr__(self, "translation", _frozen(self.translation, (3,)))

    @classmethod
    def identity(cls):
        return cls()

    @classmethod
    def from_matrix(cls, T):
        T = np.asarray(T, dtype=float)
        return cls(T[:3, :3], T[:3, 3])

    @classmethod
    def from_rotvec(cls, rotvec, translation=(0.0, 0.0, 0.0)):
        return cls(exp_so3(rotvec), translation)

    def matrix(self):
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def inverse(self):
        Rt = self.rotation.T
        return RigidMotion(Rt, -Rt @ self.translation)

    def apply(self, points):
        points = np.asarray(points, dtype=float)
        return points @ self.rotation.T + self.translation

    def __matmul__(self, other):
        return compose(self, other)

    def __repr__(self):
        rv = np.degrees(log_so3(self.rotation))
        return f"RigidMotion(rotvec_deg={np.round(rv, 6).tolist()}, t={np.round(self.translation, 6).tolist()})"


def compose(a: RigidMotion, b: RigidMotion) -> RigidMotion:
    """4x4 product ``a @ b`` (apply ``b``, then ``a``)."""
    R = a.rotation @ b.rotation
    if np.abs(R.T @ R - np.eye(3)).max() > 1e-12:
        R = orthonormalize(R)
    return RigidMotion(R, a.rotation @ b.translation + a.translation)


def invert(m: RigidMotion) -> RigidMotion:
    return m.inverse()


def motion_difference(a: RigidMotion, b: RigidMotion):
    """(rotation angle in radians, translation distance in meters) between two motions."""
    return rotation_angle(a.rotation.T @ b.rotation), float(np.linalg.norm(a.translation - b.translation))


@dataclass(frozen=True, eq=False)
class ScaledMotion:
    """A motion whose translation is known only up to scale.

    ``scale`` is ``None`` until it has been recovered (by hand-eye solving or
    range-aided odometry); ``to_motion`` then yields the metric motion.
    """

    rotation: np.ndarray
    direction: np.ndarray
    scale: float | None = None

    def __post_init__(self):
        d = np.asarray(self.direction, dtype=float).reshape(3)
        n = np.linalg.norm(d)
        if n > 0:
            d = d / n
        object.__setattr__(self, "rotation", _frozen(self.rotation, (3, 3)))
        object.__setattr__(self, "direction", _frozen(d))

    @classmethod
    def from_motion(cls, m: RigidMotion, keep_scale=True):
        s = float(np.linalg.norm(m.translation))
        return cls(m.rotation, m.translation, s if keep_scale else None)

    def with_scale(self, scale):
        return ScaledMotion(self.rotation, self.direction, scale)

    def to_motion(self, scale=None):
        s = self.scale if scale is None else scale
        if s is None:
            raise ValueError("motion has no scale")
        return RigidMotion(self.rotation, s * self.direction)


@dataclass(frozen=True)
class CameraModel:
    """Central camera: pinhole (``perspective``) or equirectangular (``spherical``).

    Camera frame: z forward, x right, y down. For the spherical model the
    longitude ``atan2(x, z)`` maps linearly to the column and the latitude
    ``asin(y)`` to the row, so the optical axis lands in the image center.
    """

    kind: str
    width: int
    height: int
    fx: float = 0.0
    fy: float = 0.0
    cx: float = 0.0
    cy: float = 0.0

    def __post_init__(self):
        if self.kind not in ("perspective", "spherical"):
            raise ValueError(f"unknown camera kind {self.kind!r}")

    @classmethod
    def spherical(cls, width=2048, height=1024):
        return cls("spherical", int(width), int(height))

    @classmethod
    def perspective(cls, f, cx, cy, width=None, height=None, fy=None):
        width = int(round(2 * cx)) if width is None else int(width)
        height = int(round(2 * cy)) if height is None else int(height)
        return cls("perspective", width, height, float(f), float(f if fy is None else fy), float(cx), float(cy))

    @property
    def pixel_angle(self):
        """Approximate angular size of one pixel in radians."""
        if self.kind == "spherical":
            return 2 * np.pi / self.width
        return 1.0 / self.fx

    def project_many(self, points):
        """Project (N, 3) camera-frame points; returns (pixels, rays, valid)."""
        p = np.atleast_2d(np.asarray(points, dtype=float))
        norm = np.linalg.norm(p, axis=1)
        valid = norm > 0
        rays = np.zeros_like(p)
        rays[valid] = p[valid] / norm[valid, None]
        if self.kind == "spherical":
            lon = np.arctan2(rays[:, 0], rays[:, 2])
            lat = np.arcsin(np.clip(rays[:, 1], -1.0, 1.0))
            u = (lon / (2 * np.pi) + 0.5) * self.width
            v = (lat / np.pi + 0.5) * self.height
        else:
            z = p[:, 2]
            valid &= z > 0
            with np.errstate(divide="ignore", invalid="ignore"):
                u = np.where(valid, self.fx * p[:, 0] / z + self.cx, np.nan)
                v = np.where(valid, self.fy * p[:, 1] / z + self.cy, np.nan)
        return np.column_stack([u, v]), rays, valid

    def project(self, p_c):
        """Project a single camera-frame point; returns (pixel, unit ray)."""
        p_c = np.asarray(p_c, dtype=float)
        if not np.any(p_c):
            raise ValueError("cannot project the camera center")
        px, rays, valid = self.project_many(p_c[None])
        if not valid[0]:
            raise BehindCamera(f"point {p_c.tolist()} is behind the camera")
        return px[0], rays[0]

    def unproject_many(self, pixels):
        px = np.atleast_2d(np.asarray(pixels, dtype=float))
        u, v = px[:, 0], px[:, 1]
        if self.kind == "spherical":
            lon = (u / self.width - 0.5) * 2 * np.pi
            lat = (v / self.height - 0.5) * np.pi
            cl = np.cos(lat)
            rays = np.column_stack([cl * np.sin(lon), np.sin(lat), cl * np.cos(lon)])
        else:
            rays = np.column_stack([(u - self.cx) / self.fx, (v - self.cy) / self.fy, np.ones_like(u)])
        return rays / np.linalg.norm(rays, axis=1, keepdims=True)

    def unproject(self, pixel):
        return self.unproject_many(np.asarray(pixel, dtype=float)[None])[0]

    def in_image(self, pixels):
        px = np.atleast_2d(pixels)
        return (
            np.isfinite(px).all(axis=1)
            & (px[:, 0] >= 0)
            & (px[:, 0] < self.width)
            & (px[:, 1] >= 0)
            & (px[:, 1] < self.height)
        )


@dataclass(frozen=True, eq=False)
class PointCloud:
    """Points in a sensor frame, optional normals (NaN rows = no normal)."""

    points: np.ndarray
    normals: np.ndarray | None = None
    origin: np.ndarray = field(default_factory=lambda: np.zeros(3))
    mesh: np.ndarray | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float).reshape(-1, 3)
        object.__setattr__(self, "points", _frozen(pts))
        object.__setattr__(self, "origin", _frozen(self.origin, (3,)))
        if self.normals is not None:
            n = np.asarray(self.normals, dtype=float).reshape(-1, 3)
            if len(n) != len(pts):
                raise ValueError("need exactly one normal per point")
            object.__setattr__(self, "normals", _frozen(n))
        if self.mesh is not None:
            object.__setattr__(self, "mesh", _frozen(self.mesh, (-1, 3), dtype=np.int64))

    def __len__(self):
        return len(self.points)

    @property
    def has_normals(self):
        return self.normals is not None

    def normal_mask(self):
        if self.normals is None:
            return np.zeros(len(self), dtype=bool)
        return np.isfinite(self.normals).all(axis=1)

    def transformed(self, m: RigidMotion) -> PointCloud:
        normals = None if self.normals is None else self.normals @ m.rotation.T
        return PointCloud(m.apply(self.points), normals, m.apply(self.origin), self.mesh)

    def subset(self, index) -> PointCloud:
        normals = None if self.normals is None else self.normals[index]
        return PointCloud(self.points[index], normals, self.origin)
