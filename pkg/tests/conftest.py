import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from streamsdf.geometry import DepthSamplingConfig, sample_frame, surface_normals  # noqa: E402
from streamsdf.scenes import default_intrinsics, generate_trajectory, render_depth, room1  # noqa: E402


@pytest.fixture(scope="session")
def scene():
    return room1()


@pytest.fixture(scope="session")
def orbit_poses(scene):
    return generate_trajectory("orbit", scene, 60)


@pytest.fixture(scope="session")
def frame(scene, orbit_poses):
    return render_depth(scene, orbit_poses[0], default_intrinsics(), frame_id=0)


@pytest.fixture(scope="session")
def frame_normals(frame):
    return surface_normals(frame)


@pytest.fixture
def raw_batch(frame, frame_normals):
    return sample_frame(frame, 40, DepthSamplingConfig(), np.random.default_rng(3), frame_normals)


def pytest_terminal_summary(terminalreporter):
    import acceptance_log

    if acceptance_log.LINES:
        terminalreporter.section("acceptance criteria")
        for line in acceptance_log.LINES:
            terminalreporter.write_line(line)
