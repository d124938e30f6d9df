import logging

import numpy as np
import pytest

from motioncalib.synthetic import NoiseSpec, SceneSpec, TrajectorySpec, generate_scene, simulate_dataset


@pytest.fixture(scope="session")
def scene():
    return generate_scene(SceneSpec())


@pytest.fixture(scope="session")
def noiseless(scene):
    """5 horizontal + 5 vertical noiseless motions at the default extrinsic."""
    return simulate_dataset(scene, TrajectorySpec(), noise=NoiseSpec(), seed=0)


@pytest.fixture(scope="session")
def noiseless_true_lidar(noiseless):
    ds, oracle = noiseless
    return ds.with_lidar_motions([oracle.lidar_motions[i] for i in ds.ids]), oracle


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(autouse=True)
def _quiet_logs(caplog):
    caplog.set_level(logging.ERROR)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def acceptance():
    """Record one PASS/FAIL line per criterion, then assert it."""

    def record(name, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'} {name}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line

    return record
