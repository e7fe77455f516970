import warnings

import numpy as np
import pytest

from mbirct.geometry import Geometry, uniform_angles
from mbirct.projector import ProjectorSpec


def parallel_spec(n=8, n_views=6, n_channels=12, voxel_size=1.0, angles=None):
    sched = uniform_angles(n_views) if angles is None else angles
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return ProjectorSpec(Geometry("parallel2d", n_channels, 1, voxel_size), sched, (1, n, n), voxel_size)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def small_spec():
    return parallel_spec()


_CRITERIA: list[str] = []


@pytest.fixture
def report(capsys):
    """Print one acceptance line straight to the terminal and keep it for the summary."""

    def emit(number, passed, detail):
        line = f"[criterion {number:>2}] {'PASS' if passed else 'FAIL'}  {detail}"
        _CRITERIA.append(line)
        with capsys.disabled():
            print("\n" + line)
        return passed

    return emit


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in _CRITERIA:
            terminalreporter.write_line(line)
