import numpy as np
import pytest

from hevlab.cycle_io import DriveCycle, synth_cycle
from hevlab.ems_mdp import EmsContext
from hevlab.powertrain import PowertrainParams


@pytest.fixture(scope="session")
def params():
    return PowertrainParams()


@pytest.fixture(scope="session")
def ctx():
    return EmsContext.default()


@pytest.fixture(scope="session")
def pulse():
    return synth_cycle("pulse", 600)


@pytest.fixture
def stationary():
    return DriveCycle("still", 1.0, np.zeros(30))


# one pass/fail line per acceptance criterion, printed after the run
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
