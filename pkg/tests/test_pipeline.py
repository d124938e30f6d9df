import dataclasses

import numpy as np
import pytest

from motioncalib.errors import DegenerateGeometry, DivergenceDetected, InitializationFailed
from motioncalib.geometry import RigidMotion, ScaledMotion, from_axis_angle, motion_difference, random_rotation, rot_z
from motioncalib.handeye import MotionPair
from motioncalib.pipeline import (
    LARGE_BASELINE,
    WEAK_ROTATION,
    AdvisorParams,
    CalibrationConfig,
    motion_advisor,
    predicted_projection_error,
    projection_error_closed_form,
    propagation_gain,
    run_calibration,
)


def pair(R, t=(0.1, 0, 0), scale=None, pid="p"):
    t = np.asarray(t, float)
    n = np.linalg.norm(t)
    cam = ScaledMotion(R, t / n if n else [1.0, 0, 0], scale)
    return MotionPair(cam, RigidMotion(R, t), pid)


def test_config_validation():
    with pytest.raises(ValueError):
        CalibrationConfig(rotation_eps=0)
    with pytest.raises(ValueError):
        CalibrationConfig(max_outer_iterations=-1)


def test_gain_examples():
    assert propagation_gain(np.eye(3)) == 0
    assert propagation_gain(rot_z(np.pi)) == pytest.approx(2, abs=1e-12)
    assert propagation_gain(rot_z(np.pi / 2)) == pytest.approx(np.sqrt(2), abs=1e-12)
    np.testing.assert_allclose((np.eye(3) - rot_z(np.pi)) @ [1, 0, 0], [2, 0, 0], atol=1e-12)


def test_gain_is_chord_length(rng):
    for _ in range(200):
        axis = rng.normal(size=3)
        theta = rng.uniform(0, np.pi)
        R = from_axis_angle(axis / np.linalg.norm(axis), theta)
        assert abs(propagation_gain(R) - 2 * np.sin(theta / 2)) < 1e-12


def test_advisor_flags():
    diags = motion_advisor(
        [
            pair(np.eye(3), pid="still"),
            pair(rot_z(np.radians(4.9)), pid="weak"),
            pair(rot_z(np.radians(30)), pid="good"),
            pair(rot_z(np.radians(30)), (0.5, 0, 0), scale=2.0, pid="far"),
        ]
    )
    assert [d.flags for d in diags] == [(WEAK_ROTATION,), (WEAK_ROTATION,), (), (LARGE_BASELINE,)]
    assert diags[0].propagation_gain == 0
    assert diags[3].translation_magnitude == 2.0  # metric camera baseline wins over the LiDAR proxy
    assert diags[2].translation_magnitude == pytest.approx(0.1)
    assert all(0 <= d.propagation_gain <= 2 for d in diags)
    assert motion_advisor([pair(rot_z(0.5), (0.5, 0, 0))], AdvisorParams(large_baseline=0.3))[0].flags == (LARGE_BASELINE,)


def test_projection_error_examples():
    v = np.array([0, 0, 1.0])
    a = np.array([0.1, 0, 0])
    assert predicted_projection_error(a, a, v, 1.5, 1.5) == 0
    assert predicted_projection_error([0, 0, 0.3], [0, 0, 0.3], v, 2.0, 1.0) == 0
    expected = 1 * 0.1 / (np.sqrt(1.01) * np.sqrt(4.01))  # |(2-1) a x v| / (|v - a| |2v - a|)
    assert abs(predicted_projection_error(a, a, v, 2.0, 1.0) - expected) < 1e-15
    assert abs(projection_error_closed_form(a, v, 2.0, 1.0) - expected) < 1e-15


def test_projection_error_matches_ray_geometry(rng):
    for _ in range(100):
        a, e = rng.normal(size=3), rng.normal(size=3) * 0.1
        v = rng.normal(size=3)
        v /= np.linalg.norm(v)
        al, be = rng.uniform(1, 5, 2)
        true_ray = (be * v - a) / np.linalg.norm(be * v - a)
        est = al * v - (a + e)
        oracle = np.linalg.norm(np.cross(true_ray, est / np.linalg.norm(est)))
        assert abs(predicted_projection_error(a, a + e, v, al, be) - oracle) < 1e-12


def test_projection_error_degenerate():
    with pytest.raises(DegenerateGeometry):
        predicted_projection_error([0, 0, 1.0], [0, 0, 0.5], [0, 0, 1.0], 2.0, 1.0)


def test_smaller_baseline_smaller_error(rng):
    for _ in range(20):
        d = rng.normal(size=3)
        d /= np.linalg.norm(d)
        v = rng.normal(size=3)
        v /= np.linalg.norm(v)
        e = rng.normal(size=3) * 0.02
        al, be = 4.0, 3.0
        vals = [predicted_projection_error(s * d, s * d + e, v, al, be) for s in np.linspace(0, 1.0, 21)]
        # along a baseline direction the predicted error does not shrink as |a| grows (within fp noise)
        assert vals[-1] >= vals[0] - 1e-12


def test_fixed_point_with_true_lidar(noiseless_true_lidar):
    ds, oracle = noiseless_true_lidar
    rep = run_calibration(ds)
    assert rep.status == "converged"
    assert len(rep.per_iteration) <= 6
    r, t = motion_difference(rep.extrinsic.transform, oracle.extrinsic)
    assert r < 1e-9 and t < 1e-9
    for it in rep.per_iteration[1:]:
        r, t = motion_difference(it.extrinsic.transform, rep.per_iteration[1].extrinsic.transform)
        assert r < 1e-9 and t < 1e-9
    res = [it.mean_residual for it in rep.per_iteration[1:]]
    assert all(b <= a + 1e-15 for a, b in zip(res, res[1:]))
    assert np.isnan(rep.per_iteration[0].mean_residual)
    assert rep.dataset_name == ds.name


def test_zero_iterations_is_max_iter(noiseless_true_lidar):
    ds, oracle = noiseless_true_lidar
    rep = run_calibration(ds, CalibrationConfig(max_outer_iterations=0))
    assert rep.status == "max_iter" and len(rep.per_iteration) == 1
    r, _ = motion_difference(rep.extrinsic.transform, oracle.extrinsic)
    assert r < 1e-9


def test_initialization_fails_on_parallel_axes(noiseless_true_lidar):
    ds, _ = noiseless_true_lidar
    horizontal = [m.id for m in ds.motions if m.kind == "horizontal"]
    with pytest.raises(InitializationFailed):
        run_calibration(ds.select(horizontal))


def test_drop_flagged_is_explicit(noiseless_true_lidar):
    ds, _ = noiseless_true_lidar
    cfg = CalibrationConfig(advisor=AdvisorParams(weak_rotation=np.radians(4.0), drop_flagged=True), max_outer_iterations=1)
    rep = run_calibration(ds, cfg)
    dropped = [k for k, v in rep.failures.items() if v == "dropped by motion advisor"]
    assert dropped and not set(dropped) & set(rep.extrinsic.pair_ids)
    kept = run_calibration(ds, dataclasses.replace(cfg, advisor=AdvisorParams(weak_rotation=np.radians(4.0))))
    assert not any(v == "dropped by motion advisor" for v in kept.failures.values())


def test_divergence_guard_returns_best(monkeypatch, noiseless_true_lidar):
    import motioncalib.pipeline as pl

    ds, _ = noiseless_true_lidar
    real = pl.calibrate
    calls = {"n": 0}

    def growing(pairs, mode="scaleless"):
        ext = real(pairs, mode)
        if mode == "scaled":
            calls["n"] += 1
            bump = RigidMotion(rot_z(1e-3 * calls["n"]), [0.01 * calls["n"], 0, 0])
            ext = dataclasses.replace(ext, transform=bump @ ext.transform, translation_residual=0.01 * 2 ** calls["n"])
        return ext

    monkeypatch.setattr(pl, "calibrate", growing)
    with pytest.raises(DivergenceDetected) as exc:
        run_calibration(ds.select(ds.ids[:4]))
    report = exc.value.report
    assert report.status == "failed"
    assert len(report.per_iteration) == 5  # init + 4 scaled solves (3 consecutive increases)
    best = min(report.per_iteration[1:], key=lambda r: r.mean_residual)
    assert report.extrinsic is best.extrinsic
