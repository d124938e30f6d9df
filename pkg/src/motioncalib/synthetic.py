"""Ground-truth rig simulator.

A scene is a set of rectangles (room walls, optional step). The rig carries a
panoramic LiDAR and a camera related by the true extrinsic ``X`` (LiDAR ->
camera). Station poses are LiDAR poses in the world; the camera pose at each
station is ``T_wl @ X^-1`` so every simulated motion pair satisfies
``A X = X B`` exactly.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .cam_odom import FeatureMatches, epipolar_angles
from .dataset import Dataset, MotionRecord
from .geometry import CameraModel, PointCloud, RigidMotion, from_axis_angle, rot_y, rot_z, rotation_angle, skew

OUTLIER_MIN_ANGLE = np.radians(2.0)
OUTLIER_CELL = 16.0  # pixels sharing a track-outlier decision


@dataclass(frozen=True)
class SceneSpec:
    kind: str = "box-room"
    dimensions: tuple = (10.0, 8.0, 3.0)
    density: float = 100.0
    seed: int = 0
    step_height: float = 0.3
    step_start: float = 2.0

    def __post_init__(self):
        if self.kind not in ("box-room", "box-room-with-steps"):
            raise ValueError(f"unknown scene kind {self.kind!r}")
        object.__setattr__(self, "dimensions", tuple(float(d) for d in self.dimensions))
        if len(self.dimensions) != 3 or min(self.dimensions) <= 0:
            raise ValueError("dimensions must be three positive lengths")
        if self.density < 0:
            raise ValueError("density must be non-negative")


@dataclass(frozen=True)
class TrajectorySpec:
    n_horizontal: int = 5
    n_vertical: int = 5
    rotation_magnitude: float = float(np.radians(30.0))
    translation_magnitude: float = 0.3
    seed: int = 0
    vertical_min: float = float(np.radians(3.0))
    vertical_max: float = float(np.radians(6.0))

    def __post_init__(self):
        if self.n_horizontal < 0 or self.n_vertical < 0:
            raise ValueError("motion counts must be non-negative")


@dataclass(frozen=True)
class NoiseSpec:
    lidar_range_sigma: float = 0.0
    pixel_sigma: float = 0.0
    match_outlier_fraction: float = 0.0
    track_outlier_fraction: float = 0.0

    def __post_init__(self):
        if self.lidar_range_sigma < 0 or self.pixel_sigma < 0:
            raise ValueError("noise sigmas must be non-negative")
        for f in (self.match_outlier_fraction, self.track_outlier_fraction):
            if not 0 <= f <= 1:
                raise ValueError("outlier fractions must lie in [0, 1]")


@dataclass(frozen=True, eq=False)
class Rect:
    name: str
    center: np.ndarray
    normal: np.ndarray  # points into the free space
    u: np.ndarray
    v: np.ndarray
    half_u: float
    half_v: float

    @property
    def area(self):
        return 4 * self.half_u * self.half_v

    def contains(self, points, tol=1e-9):
        d = points - self.center
        return (
            (np.abs(d @ self.normal) <= tol)
            & (np.abs(d @ self.u) <= self.half_u + tol)
            & (np.abs(d @ self.v) <= self.half_v + tol)
        )


def _rect(name, lo, hi, axis, normal_sign):
    """Axis-aligned rectangle spanning box ``lo..hi`` with zero extent along ``axis``."""
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    center = (lo + hi) / 2
    others = [a for a in range(3) if a != axis]
    e = np.eye(3)
    n = e[axis] * normal_sign
    return Rect(name, center, n, e[others[0]], e[others[1]], (hi - lo)[others[0]] / 2, (hi - lo)[others[1]] / 2)


@dataclass(frozen=True, eq=False)
class Scene:
    spec: SceneSpec
    surfaces: tuple
    cloud: PointCloud
    labels: np.ndarray = field(default=None)

    def raycast(self, origins, directions):
        """Distance to the first surface hit along each ray (inf on miss) and the surface index."""
        o = np.broadcast_to(np.asarray(origins, float), np.shape(directions))
        d = np.asarray(directions, float)
        best = np.full(len(d), np.inf)
        which = np.full(len(d), -1)
        for k, s in enumerate(self.surfaces):
            denom = d @ s.normal
            with np.errstate(divide="ignore", invalid="ignore"):
                t = ((s.center - o) @ s.normal) / denom
            hit = o + t[:, None] * d
            rel = hit - s.center
            ok = (
                (np.abs(denom) > 1e-12)
                & (t > 1e-9)
                & (np.abs(rel @ s.u) <= s.half_u)
                & (np.abs(rel @ s.v) <= s.half_v)
                & (t < best)
            )
            best[ok] = t[ok]
            which[ok] = k
        return best, which


def _surfaces(spec: SceneSpec):
    L, W, H = spec.dimensions
    x0, x1, y0, y1 = -L / 2, L / 2, -W / 2, W / 2
    if spec.kind == "box-room":
        return (
            _rect("floor", (x0, y0, 0), (x1, y1, 0), 2, 1),
            _rect("ceiling", (x0, y0, H), (x1, y1, H), 2, -1),
            _rect("wall_x0", (x0, y0, 0), (x0, y1, H), 0, 1),
            _rect("wall_x1", (x1, y0, 0), (x1, y1, H), 0, -1),
            _rect("wall_y0", (x0, y0, 0), (x1, y0, H), 1, 1),
            _rect("wall_y1", (x0, y1, 0), (x1, y1, H), 1, -1),
        )
    s, h = spec.step_start, spec.step_height
    return (
        _rect("floor", (x0, y0, 0), (s, y1, 0), 2, 1),
        _rect("step_top", (s, y0, h), (x1, y1, h), 2, 1),
        _rect("step_face", (s, y0, 0), (s, y1, h), 0, -1),
        _rect("ceiling", (x0, y0, H), (x1, y1, H), 2, -1),
        _rect("wall_x0", (x0, y0, 0), (x0, y1, H), 0, 1),
        _rect("wall_x1", (x1, y0, h), (x1, y1, H), 0, -1),
        _rect("wall_y0", (x0, y0, 0), (s, y0, H), 1, 1),
        _rect("wall_y0_upper", (s, y0, h), (x1, y0, H), 1, 1),
        _rect("wall_y1", (x0, y1, 0), (s, y1, H), 1, -1),
        _rect("wall_y1_upper", (s, y1, h), (x1, y1, H), 1, -1),
    )


def generate_scene(spec: SceneSpec = SceneSpec()) -> Scene:
    """Sample points uniformly on the analytic surfaces (exact normals kept)."""
    rng = np.random.default_rng(spec.seed)
    surfaces = _surfaces(spec)
    pts, nrm, lab = [], [], []
    for k, s in enumerate(surfaces):
        n = int(round(s.area * spec.density))
        a = rng.uniform(-1, 1, (n, 2))
        pts.append(s.center + a[:, :1] * s.half_u * s.u + a[:, 1:] * s.half_v * s.v)
        nrm.append(np.tile(s.normal, (n, 1)))
        lab.append(np.full(n, k))
    cloud = PointCloud(np.vstack(pts), np.vstack(nrm))
    return Scene(spec, surfaces, cloud, np.concatenate(lab))


def lidar_directions(resolution=np.radians(1.0), min_elevation=np.radians(-80.0), max_elevation=np.radians(80.0)):
    """Unit ray grid of a panoramic scanner in its own frame (z up)."""
    az = np.arange(-np.pi, np.pi, resolution)
    el = np.arange(min_elevation, max_elevation + resolution / 2, resolution)
    A, E = np.meshgrid(az, el)
    A, E = A.ravel(), E.ravel()
    return np.column_stack([np.cos(E) * np.cos(A), np.cos(E) * np.sin(A), np.sin(E)])


def simulate_scan(scene: Scene, pose: RigidMotion, rng=None, range_sigma=0.0, resolution=np.radians(1.0)) -> PointCloud:
    """LiDAR scan in the sensor frame; noise is applied along each ray."""
    d = lidar_directions(resolution)
    r, _ = scene.raycast(pose.translation, d @ pose.rotation.T)
    hit = np.isfinite(r)
    d, r = d[hit], r[hit]
    if range_sigma > 0:
        r = r + rng.normal(0.0, range_sigma, len(r))
    return PointCloud(d * r[:, None])


def _splitmix(x):
    x = (x + np.uint64(0x9E3779B97F4A7C15)) & np.uint64(0xFFFFFFFFFFFFFFFF)
    x = ((x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)) & np.uint64(0xFFFFFFFFFFFFFFFF)
    x = ((x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)) & np.uint64(0xFFFFFFFFFFFFFFFF)
    return x ^ (x >> np.uint64(31))


def _hash_uniform(cells, seed, count):
    """Deterministic uniforms in (0, 1) keyed on integer lattice cells: (N, count)."""
    q = np.asarray(cells).astype(np.int64).view(np.uint64)
    with np.errstate(over="ignore"):
        h = _splitmix(np.uint64(seed) ^ _splitmix(q[:, 0] ^ _splitmix(q[:, 1])))
        cols = []
        for i in range(count):
            h = _splitmix(h + np.uint64(i + 1))
            cols.append(((h >> np.uint64(11)).astype(np.float64) + 0.5) / float(1 << 53))
    return np.column_stack(cols)


def _hash_normal(cells, seed):
    u = _hash_uniform(cells, seed, 2)
    return np.sqrt(-2 * np.log(u[:, 0]))[:, None] * np.column_stack([np.cos(2 * np.pi * u[:, 1]), np.sin(2 * np.pi * u[:, 1])])


def smooth_noise(pixels, seed, spacing=4.0):
    """Continuous unit-variance 2D noise field over the image plane.

    Gaussian values on a square lattice are interpolated bilinearly and
    renormalized by the interpolation weights, so every sample is N(0, I)
    yet nearby queries see nearly the same offset, like a real tracker.
    """
    g = np.asarray(pixels, dtype=float) / spacing
    base = np.floor(g)
    f = g - base
    acc = np.zeros_like(g)
    norm = np.zeros(len(g))
    for dx in (0, 1):
        for dy in (0, 1):
            w = np.abs(1 - dx - f[:, 0]) * np.abs(1 - dy - f[:, 1])
            acc += w[:, None] * _hash_normal(base + [dx, dy], seed)
            norm += w * w
    return acc / np.sqrt(norm)[:, None]


class OracleTracker:
    """Tracks pixels through the true scene geometry.

    The scene is ray-cast through the query pixel from the true first camera
    and the hit is re-projected into the true second camera, which is what a
    perfect image tracker would report. Noise is a smooth deterministic
    field over the first image and outliers are decided per 16-pixel cell,
    so repeated and nearby queries agree.
    """

    def __init__(self, scene, camera, pose1, pose2, pixel_sigma=0.0, outlier_fraction=0.0, seed=0):
        self.scene = scene
        self.camera = camera
        self.pose1 = pose1  # camera-to-world
        self.pose2 = pose2
        self.pixel_sigma = pixel_sigma
        self.outlier_fraction = outlier_fraction
        self.seed = int(seed)

    def track(self, pixels):
        px = np.atleast_2d(np.asarray(pixels, dtype=float))
        out = np.full_like(px, np.nan)
        ok = self.camera.in_image(px)
        if not ok.any():
            return out, ok
        rays_w = self.camera.unproject_many(px[ok]) @ self.pose1.rotation.T
        dist, _ = self.scene.raycast(self.pose1.translation, rays_w)
        world = self.pose1.translation + dist[:, None] * rays_w
        c2 = self.pose2.translation
        to = world - c2
        rng2 = np.linalg.norm(to, axis=1)
        d2, _ = self.scene.raycast(c2, to / rng2[:, None])
        visible = np.isfinite(dist) & (d2 > rng2 - 1e-6)
        p2 = self.pose2.inverse().apply(world)
        px2, _, valid = self.camera.project_many(p2)
        if self.pixel_sigma > 0:
            px2 = px2 + self.pixel_sigma * smooth_noise(px[ok], self.seed)
        if self.outlier_fraction > 0:
            u = _hash_uniform(np.floor(px[ok] / OUTLIER_CELL), self.seed ^ 0x5EED, 3)
            bad = u[:, 0] < self.outlier_fraction
            ang = 2 * np.pi * u[bad, 1]
            px2[bad] += (10.0 + 40.0 * u[bad, 2:3]) * np.column_stack([np.cos(ang), np.sin(ang)])
        if self.camera.kind == "spherical":
            px2[:, 0] = np.mod(px2[:, 0], self.camera.width)
        good = visible & valid & self.camera.in_image(px2)
        sel = np.flatnonzero(ok)
        out[sel[good]] = px2[good]
        ok[sel[~good]] = False
        return out, ok


@dataclass(frozen=True, eq=False)
class Oracle:
    extrinsic: RigidMotion
    station_poses: tuple  # LiDAR poses in the world
    lidar_motions: dict
    camera_motions: dict
    match_outliers: dict
    dataset_id: str = ""

    def to_dict(self):
        def mot(m):
            return {"matrix": m.matrix().tolist()}

        return {
            "dataset_id": self.dataset_id,
            "extrinsic": mot(self.extrinsic),
            "station_poses": [mot(p) for p in self.station_poses],
            "lidar_motions": {k: mot(v) for k, v in self.lidar_motions.items()},
            "camera_motions": {k: mot(v) for k, v in self.camera_motions.items()},
            "match_outliers": {k: [int(i) for i in v] for k, v in self.match_outliers.items()},
        }

    @classmethod
    def from_dict(cls, d):
        def mot(x):
            return RigidMotion.from_matrix(np.array(x["matrix"]))

        return cls(
            extrinsic=mot(d["extrinsic"]),
            station_poses=tuple(mot(p) for p in d.get("station_poses", [])),
            lidar_motions={k: mot(v) for k, v in d.get("lidar_motions", {}).items()},
            camera_motions={k: mot(v) for k, v in d.get("camera_motions", {}).items()},
            match_outliers={k: np.array(v, dtype=int) for k, v in d.get("match_outliers", {}).items()},
            dataset_id=d.get("dataset_id", ""),
        )


def default_extrinsic():
    """10 degrees about a skew axis, t = (0.2, 0.05, 0.1) m."""
    axis = np.array([1.0, 1.0, 1.0]) / np.sqrt(3.0)
    return RigidMotion(from_axis_angle(axis, np.radians(10.0)), [0.2, 0.05, 0.1])


def station_poses(spec: TrajectorySpec, scene_spec: SceneSpec = SceneSpec(), rng=None):
    """LiDAR poses and motion labels: horizontal and vertical motions interleaved."""
    rng = np.random.default_rng(spec.seed) if rng is None else rng
    L, W, _ = scene_spec.dimensions
    start = np.array([rng.uniform(-0.5, 0.5) - 0.5, rng.uniform(-0.5, 0.5), 1.2])
    if scene_spec.kind == "box-room-with-steps":
        start[0] = min(start[0], scene_spec.step_start - 1.0)
    poses = [RigidMotion(rot_z(rng.uniform(-np.pi, np.pi)), start)]
    kinds = []
    for i in range(max(spec.n_horizontal, spec.n_vertical)):
        if i < spec.n_horizontal:
            kinds.append("horizontal")
        if i < spec.n_vertical:
            kinds.append("vertical")
    pitch_sign = 1.0
    pivot = np.array([-0.5, 0.0, -1.0])
    motions = []
    for kind in kinds:
        cur = poses[-1]
        if kind == "horizontal":
            yaw = rng.choice([-1.0, 1.0]) * rng.uniform(0.75, 1.25) * spec.rotation_magnitude
            for _ in range(20):
                heading = rng.uniform(-np.pi, np.pi)
                step = rng.uniform(0.5, 1.0) * spec.translation_magnitude * np.array([np.cos(heading), np.sin(heading), 0.0])
                B = RigidMotion(rot_z(yaw), step)
                nxt = (cur @ B).translation
                limit_x = scene_spec.step_start - 0.7 if scene_spec.kind == "box-room-with-steps" else L / 2 - 1.5
                if -L / 2 + 1.5 < nxt[0] < limit_x and abs(nxt[1]) < W / 2 - 1.5:
                    break
        else:
            pitch = pitch_sign * rng.uniform(spec.vertical_min, spec.vertical_max)
            pitch_sign = -pitch_sign
            R = rot_y(pitch)
            B = RigidMotion(R, pivot - R @ pivot)
        motions.append(B)
        poses.append(cur @ B)
    return poses, motions, kinds


def matches_between(scene, camera, pose1, pose2, n, rng, pixel_sigma=0.0, outlier_fraction=0.0):
    """Feature matches seen from two camera poses; returns (pixels1, pixels2, outlier indices)."""
    cloud = scene.cloud.points
    px1_all, px2_all = [], []
    want = n
    tries = 0
    while want > 0 and tries < 20:
        tries += 1
        cand = cloud[rng.choice(len(cloud), size=4 * want + 16, replace=False)]
        keep = np.ones(len(cand), dtype=bool)
        pix = []
        for pose in (pose1, pose2):
            d = cand - pose.translation
            r = np.linalg.norm(d, axis=1)
            hit, _ = scene.raycast(pose.translation, d / r[:, None])
            keep &= hit > r - 1e-6
            px, _, valid = camera.project_many(pose.inverse().apply(cand))
            keep &= valid & camera.in_image(px)
            pix.append(px)
        sel = np.flatnonzero(keep)[:want]
        px1_all.append(pix[0][sel])
        px2_all.append(pix[1][sel])
        want -= len(sel)
    px1 = np.vstack(px1_all)
    px2 = np.vstack(px2_all)
    if pixel_sigma > 0:
        px1 = px1 + rng.normal(0.0, pixel_sigma, px1.shape)
        px2 = px2 + rng.normal(0.0, pixel_sigma, px2.shape)
        if camera.kind == "spherical":
            px1[:, 0] %= camera.width
            px2[:, 0] %= camera.width
    n_out = int(round(outlier_fraction * len(px1)))
    outliers = np.sort(rng.choice(len(px1), size=n_out, replace=False)) if n_out else np.zeros(0, dtype=int)
    if n_out:
        rel = pose2.inverse() @ pose1  # camera-1 coordinates -> camera-2 coordinates
        E = skew(rel.translation) @ rel.rotation
        ray1 = camera.unproject_many(px1[outliers])
        for j, i in enumerate(outliers):
            while True:
                cand = rng.uniform([0, 0], [camera.width, camera.height])
                ang = epipolar_angles(E, ray1[j : j + 1], camera.unproject_many(cand))
                if ang[0] > OUTLIER_MIN_ANGLE:
                    px2[i] = cand
                    break
    return px1, px2, outliers


def dataset_id(*parts):
    blob = json.dumps([p if not hasattr(p, "__dataclass_fields__") else asdict(p) for p in parts], sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def simulate_dataset(
    scene: Scene,
    trajectory: TrajectorySpec = TrajectorySpec(),
    true_extrinsic: RigidMotion | None = None,
    camera: CameraModel | None = None,
    noise: NoiseSpec = NoiseSpec(),
    *,
    seed: int | None = None,
    n_matches: int = 300,
    scan_resolution: float = float(np.radians(1.0)),
):
    """Scans, matches and oracle trackers for every motion, plus the sealed truth."""
    X = default_extrinsic() if true_extrinsic is None else true_extrinsic
    camera = CameraModel.spherical() if camera is None else camera
    seed = trajectory.seed if seed is None else int(seed)
    ss = np.random.SeedSequence(seed)
    traj_ss, scan_ss, match_ss = ss.spawn(3)
    poses, motions, kinds = station_poses(trajectory, scene.spec, np.random.default_rng(traj_ss))
    X_inv = X.inverse()
    cam_poses = [p @ X_inv for p in poses]
    scan_rngs = [np.random.default_rng(s) for s in scan_ss.spawn(len(poses))]
    scans = [
        simulate_scan(scene, p, r, noise.lidar_range_sigma, scan_resolution) for p, r in zip(poses, scan_rngs)
    ]
    match_rngs = [np.random.default_rng(s) for s in match_ss.spawn(len(motions))]
    did = dataset_id("synthetic", scene.spec, trajectory, noise, X.matrix().tolist(), asdict(camera), seed, n_matches, scan_resolution)
    records = []
    lidar_truth, cam_truth, outliers = {}, {}, {}
    for k, (B, kind) in enumerate(zip(motions, kinds)):
        mid = f"m{k:02d}"
        px1, px2, out = matches_between(
            scene, camera, cam_poses[k], cam_poses[k + 1], n_matches, match_rngs[k], noise.pixel_sigma, noise.match_outlier_fraction
        )
        tracker = OracleTracker(
            scene, camera, cam_poses[k], cam_poses[k + 1], noise.pixel_sigma, noise.track_outlier_fraction, seed * 1000003 + k
        )
        records.append(
            MotionRecord(
                mid, scans[k], scans[k + 1], FeatureMatches.from_pixels(camera, px1, px2), tracker, kind, match_pixels=(px1, px2)
            )
        )
        lidar_truth[mid] = B
        cam_truth[mid] = cam_poses[k].inverse() @ cam_poses[k + 1]
        outliers[mid] = out
    oracle = Oracle(X, tuple(poses), lidar_truth, cam_truth, outliers, did)
    return Dataset(camera, records, did), oracle


def evaluate_extrinsic(estimate: RigidMotion, truth: RigidMotion):
    """(rotation error in degrees, translation error in meters)."""
    rot = np.degrees(rotation_angle(estimate.rotation @ truth.rotation.T))
    return float(rot), float(np.linalg.norm(estimate.translation - truth.translation))
