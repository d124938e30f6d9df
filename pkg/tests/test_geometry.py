import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from motioncalib.errors import BehindCamera, NearIdentity
from motioncalib.geometry import (
    CameraModel,
    PointCloud,
    RigidMotion,
    ScaledMotion,
    compose,
    from_axis_angle,
    from_quaternion,
    invert,
    motion_difference,
    random_rotation,
    rot_z,
    rotation_axis_angle,
    to_quaternion,
)

unit_quat = st.lists(st.floats(-1, 1), min_size=4, max_size=4).filter(lambda q: np.linalg.norm(q) > 0.1)


def random_motion(rng):
    return RigidMotion(random_rotation(rng), rng.normal(size=3))


def test_compose_identity_and_inverse(rng):
    m = random_motion(rng)
    assert motion_difference(compose(RigidMotion.identity(), m), m) == pytest.approx((0, 0), abs=1e-12)
    d = compose(m, invert(m))
    np.testing.assert_allclose(d.matrix(), np.eye(4), atol=1e-9)


def test_compose_hand_example():
    m = RigidMotion(rot_z(np.pi / 2), [1, 0, 0])
    c = compose(m, m)
    np.testing.assert_allclose(c.rotation, rot_z(np.pi), atol=1e-15)
    np.testing.assert_allclose(c.translation, [1, 1, 0], atol=1e-15)


def test_compose_matches_matrix_product(rng):
    a, b = random_motion(rng), random_motion(rng)
    np.testing.assert_allclose(compose(a, b).matrix(), a.matrix() @ b.matrix(), atol=1e-12)


def test_group_laws(rng):
    for _ in range(50):
        a, b, c = (random_motion(rng) for _ in range(3))
        np.testing.assert_allclose(compose(compose(a, b), c).matrix(), compose(a, compose(b, c)).matrix(), atol=1e-9)
        np.testing.assert_allclose(compose(invert(a), a).matrix(), np.eye(4), atol=1e-9)


def test_compose_reorthonormalizes_drift():
    R = rot_z(0.3) + 1e-9 * np.ones((3, 3))
    m = RigidMotion.__new__(RigidMotion)
    object.__setattr__(m, "rotation", R)
    object.__setattr__(m, "translation", np.zeros(3))
    c = compose(m, RigidMotion.identity())
    np.testing.assert_allclose(c.rotation.T @ c.rotation, np.eye(3), atol=1e-14)


def test_rotation_invariants(rng):
    for _ in range(100):
        R = random_rotation(rng)
        assert np.linalg.norm(R.T @ R - np.eye(3)) < 1e-9
        assert abs(np.linalg.det(R) - 1) < 1e-9


def test_axis_angle_canonical():
    aa = rotation_axis_angle(rot_z(np.pi / 2))
    np.testing.assert_allclose(aa.axis, [0, 0, 1], atol=1e-15)
    assert aa.angle == pytest.approx(np.pi / 2, abs=1e-15)


def test_axis_angle_identity_rejected():
    with pytest.raises(NearIdentity):
        rotation_axis_angle(np.eye(3))
    with pytest.raises(NearIdentity):
        rotation_axis_angle(from_axis_angle([1, 0, 0], 5e-7))


def test_axis_angle_round_trip_1000_seeds():
    worst = 0.0
    for seed in range(1000):
        R = random_rotation(np.random.default_rng(seed))
        aa = rotation_axis_angle(R)
        assert abs(np.linalg.norm(aa.axis) - 1) < 1e-12 and 0 <= aa.angle <= np.pi
        worst = max(worst, np.abs(from_axis_angle(*aa) - R).max())
    assert worst < 1e-9


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-1, 1), min_size=3, max_size=3).filter(lambda v: np.linalg.norm(v) > 1e-3), st.floats(1e-3, np.pi - 1e-3))
def test_from_to_axis_angle(axis, angle):
    axis = np.array(axis) / np.linalg.norm(axis)
    aa = rotation_axis_angle(from_axis_angle(axis, angle))
    np.testing.assert_allclose(from_axis_angle(*aa), from_axis_angle(axis, angle), atol=1e-9)


@settings(max_examples=200, deadline=None)
@given(unit_quat)
def test_quaternion_round_trip(q):
    q = np.array(q) / np.linalg.norm(q)
    R = from_quaternion(q)
    q2 = to_quaternion(R)
    assert q2[0] >= 0
    np.testing.assert_allclose(from_quaternion(q2), R, atol=1e-12)


def test_axis_conjugation(rng):
    # axis of R Rb R^T is R kb
    for _ in range(100):
        R = random_rotation(rng)
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        Rb = from_axis_angle(axis, rng.uniform(0.1, 3.0))
        np.testing.assert_allclose(rotation_axis_angle(R @ Rb @ R.T).axis, R @ axis, atol=1e-9)


def test_rigid_motion_is_immutable():
    m = RigidMotion(rot_z(0.1), [1, 2, 3])
    with pytest.raises(ValueError):
        m.translation[0] = 5.0


def test_scaled_motion():
    m = RigidMotion(rot_z(0.2), [0.3, 0.4, 0.0])
    s = ScaledMotion.from_motion(m)
    assert s.scale == pytest.approx(0.5)
    assert np.linalg.norm(s.direction) == pytest.approx(1, abs=1e-12)
    np.testing.assert_allclose(s.to_motion().translation, m.translation, atol=1e-15)
    free = ScaledMotion.from_motion(m, keep_scale=False)
    assert free.scale is None
    with pytest.raises(ValueError):
        free.to_motion()


def test_project_examples():
    sph = CameraModel.spherical()
    _, ray = sph.project([0, 0, 1])
    np.testing.assert_allclose(ray, [0, 0, 1])
    cam = CameraModel.perspective(500, 320, 240)
    px, _ = cam.project([0, 0, 2])
    np.testing.assert_allclose(px, [320, 240])
    px, ray = cam.project([1, 0, 2])
    np.testing.assert_allclose(px, [570, 240])
    np.testing.assert_allclose(ray, np.array([1, 0, 2]) / np.sqrt(5), atol=1e-15)


def test_perspective_behind_camera():
    with pytest.raises(BehindCamera):
        CameraModel.perspective(500, 320, 240).project([0, 0, -1])


@pytest.mark.parametrize("camera", [CameraModel.spherical(2048, 1024), CameraModel.perspective(500, 320, 240)])
def test_unproject_project_round_trip(camera, rng):
    p = rng.normal(size=(500, 3)) + [0, 0, 3]
    px, rays, valid = camera.project_many(p)
    back = camera.unproject_many(px[valid])
    np.testing.assert_allclose(back, rays[valid], atol=1e-9)
    np.testing.assert_allclose(rays[valid], p[valid] / np.linalg.norm(p[valid], axis=1, keepdims=True), atol=1e-9)


def test_point_cloud_normals_checked():
    with pytest.raises(ValueError):
        PointCloud(np.zeros((3, 3)), normals=np.zeros((2, 3)))
    c = PointCloud(np.eye(3), normals=np.array([[0, 0, 1], [np.nan] * 3, [1, 0, 0]]))
    np.testing.assert_array_equal(c.normal_mask(), [True, False, True])
