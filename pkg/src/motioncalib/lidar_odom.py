"""LiDAR odometry by point-to-plane ICP with projective (gaze-direction) association."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import Diverged, InsufficientScans, NoOverlap
from .geometry import PointCloud, RigidMotion, exp_so3

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class IcpParams:
    initial_reject_distance: float = 0.5
    final_reject_distance: float = 0.02
    shrink_factor: float = 0.7
    max_iterations: int = 20
    convergence_eps: float = 1e-8
    max_normal_angle: float = float(np.radians(45.0))
    max_source_points: int = 20000
    anchor_neighbors: int = 10

    def __post_init__(self):
        if not 0 < self.shrink_factor < 1:
            raise ValueError("shrink_factor must lie in (0, 1)")
        if self.final_reject_distance > self.initial_reject_distance:
            raise ValueError("final_reject_distance must not exceed initial_reject_distance")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")

    def thresholds(self):
        out = []
        d = self.initial_reject_distance
        while d > self.final_reject_distance:
            out.append(d)
            d *= self.shrink_factor
        out.append(self.final_reject_distance)
        return out


@dataclass
class IcpResult:
    motion: RigidMotion
    rms_residual: float
    inlier_fraction: float
    iterations: int
    rms_history: list = field(default_factory=list)  # one list of RMS values per threshold level


def estimate_normals(cloud: PointCloud, k=10, max_curvature=0.005) -> PointCloud:
    """PCA plane fit over the k nearest neighbors of every point.

    Normals point toward the sensor origin. Points whose neighborhood is not
    planar (surface variation above ``max_curvature``) get a NaN normal.
    """
    pts = cloud.points
    n = len(pts)
    normals = np.full((n, 3), np.nan)
    if n < 3:
        return PointCloud(pts, normals, cloud.origin, cloud.mesh)
    k = min(k, n)
    _, idx = cKDTree(pts).query(pts, k=k)
    nb = pts[idx]
    centered = nb - nb.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / k
    evals, evecs = np.linalg.eigh(cov)
    normal = evecs[:, :, 0]
    total = evals.sum(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        variation = np.where(total > 0, evals[:, 0] / total, np.inf)
    flip = np.einsum("ni,ni->n", normal, cloud.origin - pts) < 0
    normal[flip] *= -1
    ok = variation <= max_curvature
    normals[ok] = normal[ok]
    return PointCloud(pts, normals, cloud.origin, cloud.mesh)


def _angles(vectors):
    az = np.arctan2(vectors[:, 1], vectors[:, 0])
    el = np.arctan2(vectors[:, 2], np.hypot(vectors[:, 0], vectors[:, 1]))
    return az, el


class AngularGrid:
    """Azimuth/elevation lookup table around a scan's sensor origin.

    Each bin keeps the nearest point falling into it, so a query direction
    returns the surface the sensor actually saw along that gaze direction.
    """

    def __init__(self, cloud: PointCloud, bin_size=None):
        self.origin = cloud.origin
        d = cloud.points - self.origin
        rng = np.linalg.norm(d, axis=1)
        keep = rng > 0
        if bin_size is None:
            bin_size = 2.0 * median_angular_spacing(cloud)
        self.bin_size = float(bin_size)
        self.n_az = max(1, int(np.ceil(2 * np.pi / self.bin_size)))
        self.n_el = max(1, int(np.ceil(np.pi / self.bin_size)))
        bins = np.full(len(d), -1)
        bins[keep] = self._bins(d[keep])
        order = np.lexsort((rng, bins))
        order = order[bins[order] >= 0]
        first = np.ones(len(order), dtype=bool)
        first[1:] = bins[order][1:] != bins[order][:-1]
        self.table = np.full(self.n_az * self.n_el, -1)
        self.table[bins[order][first]] = order[first]

    def _bins(self, d):
        az, el = _angles(d)
        ia = np.floor((az + np.pi) / self.bin_size).astype(int) % self.n_az
        ie = np.clip(np.floor((el + np.pi / 2) / self.bin_size).astype(int), 0, self.n_el - 1)
        return ie * self.n_az + ia

    def lookup(self, points):
        """Index of the target point along each query's gaze direction, -1 if none."""
        d = np.asarray(points) - self.origin
        out = np.full(len(d), -1)
        ok = np.linalg.norm(d, axis=1) > 0
        out[ok] = self.table[self._bins(d[ok])]
        return out


def median_angular_spacing(cloud: PointCloud):
    d = cloud.points - cloud.origin
    r = np.linalg.norm(d, axis=1)
    u = d[r > 0] / r[r > 0, None]
    if len(u) < 2:
        return np.pi
    dist, _ = cKDTree(u).query(u, k=2)
    chord = dist[:, 1]
    return float(np.median(2 * np.arcsin(np.clip(chord / 2, 0, 1))))


def _ensure_normals(cloud):
    return cloud if cloud.has_normals else estimate_normals(cloud)


def icp_align(source: PointCloud, target: PointCloud, init: RigidMotion = None, params: IcpParams = IcpParams()) -> IcpResult:
    """Motion mapping source-frame coordinates into the target frame.

    Each source point is paired with the target point seen along the same
    gaze direction from the target sensor origin. Pairs farther apart than
    the current reject distance, or with normals more than
    ``max_normal_angle`` apart, are dropped. Point-to-plane rows are used
    where the target point has a normal; a target without any normals is
    matched point-to-point against the nearest target point (the gaze
    lookup then only decides visibility). ``rms_history`` holds, per level, the truncated
    cost ``sqrt(mean(min(r^2, d^2)))`` (unmatched points count as ``d``).
    """
    init = RigidMotion.identity() if init is None else init
    source = _ensure_normals(source)
    target = _ensure_normals(target)
    if len(source) > params.max_source_points:
        source = source.subset(np.linspace(0, len(source) - 1, params.max_source_points).astype(int))
    grid = AngularGrid(target)
    tgt_pts = target.points
    tgt_has_n = target.normal_mask()
    point_to_plane = bool(tgt_has_n.any())
    tgt_nrm = np.where(tgt_has_n[:, None], target.normals, 0.0) if point_to_plane else None
    if point_to_plane:
        # plane anchors: neighborhood centroids are free of the nearest-range selection bias
        _, nb = cKDTree(tgt_pts).query(tgt_pts, k=min(params.anchor_neighbors, len(tgt_pts)))
        tgt_pts = np.where(tgt_has_n[:, None], tgt_pts[nb].mean(axis=1), tgt_pts)
    else:
        tree = cKDTree(tgt_pts)
    tgt_range = np.linalg.norm(target.points - target.origin, axis=1)
    src_pts = source.points
    src_has_n = source.normal_mask()
    src_nrm = np.where(src_has_n[:, None], source.normals, 0.0) if source.normals is not None else None
    cos_max = np.cos(params.max_normal_angle)
    n_src = len(src_pts)

    T = init
    total_iters = 0
    history = []
    rms, frac = np.inf, 0.0
    for thr in params.thresholds():
        level_hist = []
        increases = 0
        for _ in range(params.max_iterations):
            p = T.apply(src_pts)
            idx = grid.lookup(p)
            hit = idx >= 0
            if point_to_plane:
                idx = np.maximum(idx, 0)
            else:
                # the gaze bin is far coarser than a point-to-point residual; pair with the nearest point instead
                idx = tree.query(p)[1]
            diff = p - tgt_pts[idx]
            dist = np.linalg.norm(diff, axis=1)
            if point_to_plane:
                nq = tgt_nrm[idx]
                # gate on the plane distance; the in-plane gate only has to cover the bin footprint
                ok = hit & tgt_has_n[idx] & (np.abs(np.einsum("ni,ni->n", diff, nq)) < thr)
                ok &= dist < thr + 2.0 * grid.bin_size * tgt_range[idx]
                if src_nrm is not None:
                    both = ok & src_has_n
                    ns = src_nrm[both] @ T.rotation.T
                    ok[np.flatnonzero(both)[np.einsum("ni,ni->n", ns, nq[both]) <= cos_max]] = False
            else:
                ok = hit & (dist < thr)
            count = int(ok.sum())
            if count == 0:
                raise NoOverlap(f"no correspondences within {thr:.3g} m")
            if point_to_plane:
                r = np.einsum("ni,ni->n", diff[ok], nq[ok])
                J = np.hstack([np.cross(p[ok], nq[ok]), nq[ok]])
                sq = r * r
            else:
                pp = p[ok]
                r = diff[ok].ravel()
                J = np.zeros((3 * len(pp), 6))
                J[:, :3] = -np.einsum("nij->nij", _skew_stack(pp)).reshape(-1, 3)
                J[:, 3:] = np.tile(np.eye(3), (len(pp), 1))
                sq = (diff[ok] ** 2).sum(axis=1)
            rms = float(np.sqrt(np.mean(sq)))
            frac = count / n_src
            truncated = float(np.sqrt((np.minimum(sq, thr * thr).sum() + thr * thr * (n_src - count)) / n_src))
            level_hist.append(truncated)
            if len(level_hist) > 1 and truncated > level_hist[-2]:
                increases += 1
                if increases >= 5:
                    raise Diverged(f"ICP residual increased {increases} consecutive iterations")
            else:
                increases = 0
            xi = np.linalg.lstsq(J, -r, rcond=None)[0]
            T = RigidMotion(exp_so3(xi[:3]), xi[3:]) @ T
            total_iters += 1
            if np.linalg.norm(xi[:3]) + np.linalg.norm(xi[3:]) < params.convergence_eps:
                break
        history.append(level_hist)
    return IcpResult(T, rms, float(frac), total_iters, history)


def _skew_stack(v):
    sk = np.zeros((len(v), 3, 3))
    sk[:, 0, 1], sk[:, 0, 2] = -v[:, 2], v[:, 1]
    sk[:, 1, 0], sk[:, 1, 2] = v[:, 2], -v[:, 0]
    sk[:, 2, 0], sk[:, 2, 1] = -v[:, 1], v[:, 0]
    return sk


def odometry_chain(scans, params: IcpParams = IcpParams()):
    """Consecutive motions ``B_k`` (pose of scan k+1 in the scan-k frame)."""
    if len(scans) < 2:
        raise InsufficientScans(f"need at least 2 scans, got {len(scans)}")
    scans = [_ensure_normals(s) for s in scans]
    motions = []
    for k in range(len(scans) - 1):
        motions.append(icp_align(scans[k + 1], scans[k], RigidMotion.identity(), params).motion)
    return motions
