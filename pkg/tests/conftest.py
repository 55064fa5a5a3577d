import numpy as np
import pytest

from partialpose.bench import default_intrinsics, orbit_pose, reference_frames, sphere_poses
from partialpose.geom import Intrinsics
from partialpose.mesh import textured_box
from partialpose.model import build_model


@pytest.fixture(scope="session")
def k():
    return default_intrinsics()


@pytest.fixture(scope="session")
def small_k():
    return Intrinsics(150.0, 150.0, 79.5, 59.5, 160, 120)


@pytest.fixture(scope="session")
def box():
    return textured_box()


@pytest.fixture(scope="session")
def full_model(box, k):
    """Box model fused from 12 views spread over the sphere (every face seen)."""
    refs = reference_frames(box, sphere_poses(12, 0.6), k)
    return build_model(refs, resolution=64)


@pytest.fixture(scope="session")
def partial_model(box, k):
    """Box model from two nearby views on one side, so much of it is uncertain."""
    poses = [orbit_pose(0.0, np.deg2rad(30), 0.6), orbit_pose(0.0, np.deg2rad(60), 0.6)]
    return build_model(reference_frames(box, poses, k), resolution=64)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def acceptance_log():
    """Collects one PASS/FAIL line per acceptance criterion for the terminal summary."""
    return _ACCEPTANCE_LINES


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
