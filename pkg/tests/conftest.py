import numpy as np
import pytest

import cranempc  # noqa: F401  (enables 64-bit JAX before any test module imports jax)
from cranempc import crane
from cranempc.edf import VoxelEdf, VoxelGrid

# Joint limits and grid shared with the bundled scenarios, so tests reuse their compiled kernels.
SCENARIO_Q_MIN = np.array([-0.9, -0.1, -2.0, 0.0, -3.14159, -1.2, -1.2])
SCENARIO_Q_MAX = np.array([0.9, 0.9, 0.0, 2.5, 3.14159, 1.2, 1.2])
GRID_LOWER = np.array([-0.8, -8.7, -4.8])
GRID_UPPER = np.array([11.0, 8.8, 11.4])
POSE = np.array([0.0, 0.5, -1.0, 1.0, 0.0])

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def params():
    return crane.default_params()


@pytest.fixture(scope="session")
def scenario_params():
    return crane.default_params(q_min=SCENARIO_Q_MIN, q_max=SCENARIO_Q_MAX)


@pytest.fixture
def workspace_edf():
    return VoxelEdf.empty(VoxelGrid.from_bounds(GRID_LOWER, GRID_UPPER, 0.1))


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
