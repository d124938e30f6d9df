import numpy as np
import pytest

from motioncalib.cam_odom import estimate_camera_motion
from motioncalib.geometry import RigidMotion, motion_difference, rot_z, rotation_angle
from motioncalib.synthetic import (
    NoiseSpec,
    Oracle,
    SceneSpec,
    TrajectorySpec,
    default_extrinsic,
    evaluate_extrinsic,
    generate_scene,
    simulate_dataset,
    smooth_noise,
)


def test_spec_validation():
    with pytest.raises(ValueError):
        SceneSpec(kind="cave")
    with pytest.raises(ValueError):
        SceneSpec(dimensions=(1, 0, 1))
    with pytest.raises(ValueError):
        TrajectorySpec(n_horizontal=-1)
    with pytest.raises(ValueError):
        NoiseSpec(pixel_sigma=-1)
    with pytest.raises(ValueError):
        NoiseSpec(match_outlier_fraction=1.5)


def test_default_extrinsic():
    X = default_extrinsic()
    assert np.degrees(rotation_angle(X.rotation)) == pytest.approx(10)
    np.testing.assert_array_equal(X.translation, [0.2, 0.05, 0.1])


def test_evaluate_extrinsic_examples():
    X = default_extrinsic()
    assert evaluate_extrinsic(X, X) == (0.0, 0.0)
    r, t = evaluate_extrinsic(RigidMotion(X.rotation @ rot_z(np.radians(1)), X.translation), X)
    assert abs(r - 1.0) < 1e-9 and t == 0
    r, t = evaluate_extrinsic(RigidMotion(X.rotation, X.translation + [0.01, 0, 0]), X)
    assert r == 0 and abs(t - 0.01) < 1e-15


def test_forward_model_consistency(noiseless):
    ds, oracle = noiseless
    X = oracle.extrinsic
    assert len(ds) == 10
    assert [m.kind for m in ds.motions].count("vertical") == 5
    for mid in ds.ids:
        A, B = oracle.camera_motions[mid], oracle.lidar_motions[mid]
        assert np.abs((A @ X).matrix() - (X @ B).matrix()).max() < 1e-12


def test_vertical_motions_are_small_pitches(noiseless):
    ds, oracle = noiseless
    for m in ds.motions:
        angle = np.degrees(rotation_angle(oracle.lidar_motions[m.id].rotation))
        if m.kind == "vertical":
            assert 3 <= angle <= 6
        else:
            assert angle > 20


def test_scan_noise_is_along_rays(scene):
    from motioncalib.synthetic import simulate_scan

    pose = RigidMotion(rot_z(0.2), [0, 0, 1.2])
    clean = simulate_scan(scene, pose)
    noisy = simulate_scan(scene, pose, np.random.default_rng(0), 0.005)
    u = clean.points / np.linalg.norm(clean.points, axis=1, keepdims=True)
    v = noisy.points / np.linalg.norm(noisy.points, axis=1, keepdims=True)
    np.testing.assert_allclose(u, v, atol=1e-12)
    dr = np.linalg.norm(noisy.points, axis=1) - np.linalg.norm(clean.points, axis=1)
    assert 0.004 < dr.std() < 0.006


def test_noiseless_matches_recover_camera_motion(noiseless):
    ds, oracle = noiseless
    for rec in ds.motions[:4]:
        est = estimate_camera_motion(rec.matches)
        A = oracle.camera_motions[rec.id]
        assert rotation_angle(est.rotation @ A.rotation.T) < 1e-6
        assert np.linalg.norm(est.direction - A.translation / np.linalg.norm(A.translation)) < 1e-6


def test_outlier_count_is_exact(scene):
    ds, oracle = simulate_dataset(
        scene, TrajectorySpec(n_horizontal=1, n_vertical=1), noise=NoiseSpec(match_outlier_fraction=0.3), seed=4, n_matches=200
    )
    for mid in ds.ids:
        assert abs(len(oracle.match_outliers[mid]) - 60) <= 1


def test_same_seed_bit_identical(scene):
    spec = TrajectorySpec(n_horizontal=1, n_vertical=1)
    noise = NoiseSpec(pixel_sigma=0.5, lidar_range_sigma=0.005, match_outlier_fraction=0.1)
    a, oa = simulate_dataset(scene, spec, noise=noise, seed=9)
    b, ob = simulate_dataset(scene, spec, noise=noise, seed=9)
    c, _ = simulate_dataset(scene, spec, noise=noise, seed=10)
    assert a.name == b.name != c.name
    for ra, rb in zip(a.motions, b.motions):
        assert np.array_equal(ra.scan_from.points, rb.scan_from.points)
        assert np.array_equal(ra.matches.rays2, rb.matches.rays2)
        grid = np.array([[100.0, 500.0], [1500.0, 300.0]])
        assert np.array_equal(ra.tracker.track(grid)[0], rb.tracker.track(grid)[0])
    assert oa.to_dict() == ob.to_dict()


def test_oracle_round_trip(noiseless):
    _, oracle = noiseless
    back = Oracle.from_dict(oracle.to_dict())
    assert back.dataset_id == oracle.dataset_id
    np.testing.assert_array_equal(back.extrinsic.matrix(), oracle.extrinsic.matrix())


def test_smooth_noise_statistics():
    px = np.random.default_rng(0).uniform(0, 2000, (20000, 2))
    n = smooth_noise(px, 3)
    assert abs(n.mean()) < 0.05 and 0.9 < n.std() < 1.1
    np.testing.assert_array_equal(n, smooth_noise(px, 3))
    near = smooth_noise(px + 0.01, 3)
    assert np.abs(near - n).max() < 0.05  # continuous in the pixel position


def test_oracle_tracker_noiseless_and_in_bounds(noiseless):
    ds, oracle = noiseless
    rec = ds.motions[0]
    grid = np.column_stack([np.linspace(10, 2000, 300), np.linspace(10, 1000, 300)])
    px, ok = rec.tracker.track(grid)
    assert ok.any()
    assert ds.camera.in_image(px[ok]).all()


def test_steps_scene_has_more_surfaces():
    assert len(generate_scene(SceneSpec(kind="box-room-with-steps", density=20)).surfaces) > len(
        generate_scene(SceneSpec(density=20)).surfaces
    )
