import numpy as np
import pytest

from motioncalib.errors import DegenerateAxes, InsufficientPairs, RankDeficient
from motioncalib.geometry import RigidMotion, ScaledMotion, from_axis_angle, random_rotation, rot_x, rot_z, rotation_angle
from motioncalib.handeye import (
    MotionPair,
    calibrate,
    refine_rotation,
    refine_translation,
    rotation_cost,
    solve_rotation_linear,
    solve_translation_linear,
    solve_translation_scales,
    translation_residuals,
)


def forward_pairs(X, lidar_motions, keep_scale=False):
    """Camera motions from the forward model A = X B X^-1."""
    Xi = X.inverse()
    return [MotionPair.from_motions(X @ B @ Xi, B, f"p{i}", keep_scale) for i, B in enumerate(lidar_motions)]


def random_lidar_motions(rng, n):
    out = []
    for _ in range(n):
        axis = rng.normal(size=3)
        out.append(RigidMotion(from_axis_angle(axis / np.linalg.norm(axis), rng.uniform(0.2, 1.5)), rng.normal(size=3)))
    return out


def axis_pair(ka, kb, angle=0.5, tb=(0, 0, 0), ta=(0, 0, 0)):
    return MotionPair(ScaledMotion(from_axis_angle(ka, angle), ta), RigidMotion(from_axis_angle(kb, angle), tb))


def test_rotation_identity_from_matching_axes():
    pairs = [axis_pair([1, 0, 0], [1, 0, 0]), axis_pair([0, 0, 1], [0, 0, 1])]
    np.testing.assert_allclose(solve_rotation_linear(pairs), np.eye(3), atol=1e-12)


def test_rotation_recovers_rz90():
    R = rot_z(np.pi / 2)
    pairs = [axis_pair(R @ k, k) for k in np.eye(3)[:2]]
    np.testing.assert_allclose(solve_rotation_linear(pairs), R, atol=1e-12)


def test_single_axis_is_degenerate():
    pairs = [axis_pair([0, 0, 1], [0, 0, 1], a) for a in np.linspace(0.2, 1.0, 5)]
    with pytest.raises(DegenerateAxes):
        solve_rotation_linear(pairs)


def test_insufficient_pairs(rng):
    pairs = forward_pairs(RigidMotion(rot_z(0.2), [0.1, 0, 0]), random_lidar_motions(rng, 1))
    with pytest.raises(InsufficientPairs):
        calibrate(pairs)
    with pytest.raises(InsufficientPairs):
        solve_rotation_linear(pairs)


def test_refine_rotation_at_truth_takes_no_step(rng):
    X = RigidMotion(random_rotation(rng), rng.normal(size=3))
    pairs = forward_pairs(X, random_lidar_motions(rng, 6))
    res = refine_rotation(pairs, X.rotation)
    assert res.cost < 1e-13
    assert rotation_angle(res.value @ X.rotation.T) < 1e-12


def test_refine_rotation_from_2_degrees(rng):
    X = RigidMotion(random_rotation(rng), rng.normal(size=3))
    pairs = forward_pairs(X, random_lidar_motions(rng, 6))
    r0 = from_axis_angle([0, 1, 0], np.radians(2)) @ X.rotation
    res = refine_rotation(pairs, r0)
    assert rotation_angle(res.value @ X.rotation.T) < 1e-8


def test_refine_rotation_noisy_cost_monotone(rng):
    X = RigidMotion(random_rotation(rng), rng.normal(size=3))
    pairs = []
    for p in forward_pairs(X, random_lidar_motions(rng, 8)):
        noise = from_axis_angle(rng.normal(size=3) / np.sqrt(3), np.radians(0.5))
        pairs.append(MotionPair(ScaledMotion(noise @ p.camera.rotation, p.camera.direction), p.lidar, p.id))
    r0 = solve_rotation_linear(pairs)
    res = refine_rotation(pairs, r0)
    assert all(b <= a for a, b in zip(res.costs, res.costs[1:]))
    assert rotation_cost(pairs, res.value) <= rotation_cost(pairs, r0)


def test_linear_rotation_is_refinement_fixed_point(rng):
    X = RigidMotion(random_rotation(rng), rng.normal(size=3))
    pairs = forward_pairs(X, random_lidar_motions(rng, 5))
    R = solve_rotation_linear(pairs)
    assert rotation_angle(refine_rotation(pairs, R).value @ R.T) < 1e-9


def test_translation_scales_example():
    X = RigidMotion(rot_z(np.radians(10)), [0.2, 0, 0.1])
    Bs = [
        RigidMotion(rot_z(0.5), [0.3, 0.1, 0]),
        RigidMotion(rot_x(0.3), [0, 0.2, 0.1]),
        RigidMotion(from_axis_angle(np.array([0, 1, 0]), 0.4), [0.1, 0, 0.3]),
        RigidMotion(from_axis_angle(np.array([1, 1, 0]) / np.sqrt(2), 0.6), [-0.2, 0.1, 0]),
    ]
    pairs = forward_pairs(X, Bs)
    t, s = solve_translation_scales(pairs, X.rotation)
    np.testing.assert_allclose(t, X.translation, atol=1e-10)
    true_scales = [np.linalg.norm((X @ B @ X.inverse()).translation) for B in Bs]
    np.testing.assert_allclose(s, true_scales, atol=1e-10)


def test_pure_rotation_identity_extrinsic():
    Bs = [RigidMotion(rot_z(0.5)), RigidMotion(rot_x(0.4)), RigidMotion(from_axis_angle([0, 1, 0], 0.3))]
    pairs = forward_pairs(RigidMotion.identity(), Bs)
    ext = calibrate(pairs, "scaleless")
    np.testing.assert_allclose(ext.translation, 0, atol=1e-12)
    assert all(f.startswith("scale_unresolved") for f in ext.flags) and len(ext.flags) == 3


def test_same_axis_translation_rank_deficient():
    pairs = forward_pairs(RigidMotion(rot_z(0.1), [0.2, 0, 0.1]), [RigidMotion(rot_z(0.5), [0.3, 0, 0]), RigidMotion(rot_z(0.9), [0, 0.2, 0])])
    with pytest.raises(RankDeficient) as exc:
        solve_translation_scales(pairs, rot_z(0.1))
    assert "t_z" in exc.value.unobservable
    # brute-force rank check of the stacked system agrees
    A = np.zeros((6, 5))
    for i, p in enumerate(pairs):
        A[3 * i : 3 * i + 3, :3] = p.camera.rotation - np.eye(3)
        A[3 * i : 3 * i + 3, 3 + i] = p.camera.direction
    assert np.linalg.matrix_rank(A) < 5


def test_refine_translation_noiseless_and_fixed_point(rng):
    X = RigidMotion(random_rotation(rng), rng.normal(size=3))
    pairs = forward_pairs(X, random_lidar_motions(rng, 6), keep_scale=True)
    t0 = X.translation + [0.05, -0.03, 0.02]
    np.testing.assert_allclose(refine_translation(pairs, X.rotation, t0).value, X.translation, atol=1e-9)
    res = refine_translation(pairs, X.rotation, X.translation)
    np.testing.assert_allclose(res.value, X.translation, atol=1e-12)


def test_refine_translation_resists_outlier(rng):
    X = RigidMotion(random_rotation(rng), rng.normal(size=3) * 0.2)
    pairs = forward_pairs(X, random_lidar_motions(rng, 8), keep_scale=True)
    bad = pairs[0].camera.to_motion()
    shifted = RigidMotion(bad.rotation, bad.translation + [0.1, 0, 0])
    pairs[0] = MotionPair.from_motions(shifted, pairs[0].lidar, "outlier")
    t_ls = solve_translation_linear(pairs, X.rotation)
    res = refine_translation(pairs, X.rotation, t_ls)
    assert np.linalg.norm(res.value - X.translation) < np.linalg.norm(t_ls - X.translation)
    assert all(b <= a for a, b in zip(res.costs, res.costs[1:]))


def test_calibrate_noiseless_modes(rng):
    X = RigidMotion(random_rotation(rng), rng.normal(size=3) * 0.3)
    Bs = random_lidar_motions(rng, 10)
    scaleless = calibrate(forward_pairs(X, Bs), "scaleless")
    scaled = calibrate(forward_pairs(X, Bs, keep_scale=True), "scaled")
    for ext in (scaleless, scaled):
        assert rotation_angle(ext.rotation @ X.rotation.T) < 1e-9
        np.testing.assert_allclose(ext.translation, X.translation, atol=1e-8)
        assert ext.converged and not ext.flags
    true_scales = [np.linalg.norm((X @ B @ X.inverse()).translation) for B in Bs]
    np.testing.assert_allclose(scaleless.scales, true_scales, atol=1e-9)


def test_forward_model_residuals(rng):
    X = RigidMotion(random_rotation(rng), rng.normal(size=3))
    pairs = forward_pairs(X, random_lidar_motions(rng, 5), keep_scale=True)
    for p in pairs:
        A = p.camera.to_motion()
        assert np.abs((A @ X).matrix() - (X @ p.lidar).matrix()).max() < 1e-9
    assert np.abs(translation_residuals(pairs, X.rotation, X.translation)).max() < 1e-9


def test_frame_change_equivariance(rng):
    X = RigidMotion(random_rotation(rng), rng.normal(size=3))
    G = RigidMotion(random_rotation(rng), rng.normal(size=3))
    Bs = random_lidar_motions(rng, 6)
    pairs = forward_pairs(X, Bs)
    moved = [MotionPair(p.camera, G @ p.lidar @ G.inverse(), p.id) for p in pairs]
    ext = calibrate(moved)
    expected = X @ G.inverse()
    np.testing.assert_allclose(ext.transform.matrix(), expected.matrix(), atol=1e-8)


def test_near_identity_pairs_are_ignored(rng):
    X = RigidMotion(random_rotation(rng), rng.normal(size=3))
    pairs = forward_pairs(X, random_lidar_motions(rng, 4) + [RigidMotion(np.eye(3), [0.1, 0, 0])])
    ext = calibrate(pairs)
    assert len(ext.pair_ids) == 4
    np.testing.assert_allclose(ext.translation, X.translation, atol=1e-8)
