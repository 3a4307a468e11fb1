import time

import numpy as np
import pytest

from rpr3 import analysis as an
from rpr3 import manipulator as mk

# published three-decimal FK solutions of the reference robot at q = (14.98, 15.38, 12.0)
TABLE1 = np.array([
    [-8.715, 12.183, -0.987],
    [-5.495, -13.935, -0.047],
    [-14.894, 1.596, 0.244],
    [-13.417, -6.660, 0.585],
    [14.920, -1.337, 1.001],
    [14.673, -3.013, 2.133],
])
Q_REF = (14.98, 15.38, 12.0)


@pytest.fixture(scope="session")
def geom():
    return mk.ManipulatorGeometry.reference()


def _timed_bundle(depth):
    t0 = time.perf_counter()
    b = an.analyze(mk.ManipulatorGeometry.reference(), an.AnalysisConfig(max_depth=depth))
    return b, time.perf_counter() - t0


@pytest.fixture(scope="session")
def bundle6_timed():
    return _timed_bundle(6)


@pytest.fixture(scope="session")
def bundle6(bundle6_timed):
    return bundle6_timed[0]


@pytest.fixture(scope="session")
def bundle7_timed():
    return _timed_bundle(7)


@pytest.fixture(scope="session")
def bundle7(bundle7_timed):
    return bundle7_timed[0]


@pytest.fixture(scope="session")
def bundle5():
    return an.analyze(mk.ManipulatorGeometry.reference(), an.AnalysisConfig(max_depth=5))


@pytest.fixture(scope="session")
def bundle4():
    return an.analyze(mk.ManipulatorGeometry.reference(), an.AnalysisConfig(max_depth=4))


def match_rows(found, table):
    """For every table row, the max per-coordinate deviation to its closest solution."""
    found = np.asarray(found)
    d = np.abs(found[None, :, :] - table[:, None, :])
    d[..., 2] = np.abs(mk.wrap_angle(found[None, :, 2] - table[:, None, 2]))
    dev = d.max(axis=2)
    return dev.min(axis=1), dev.argmin(axis=1)


# acceptance outcomes, printed once at the end of the session
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[key])
