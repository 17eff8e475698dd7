import numpy as np
import pytest

from sfrom.fine_grid import GridMedium, assemble
from sfrom.partition import regular_partition, remove_corner_set

# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE = {}


def record(number, passed, detail):
    ACCEPTANCE[number] = (passed, detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[n]
        status = {True: "PASS", False: "FAIL", None: "INFO"}[passed]
        terminalreporter.write_line(f"criterion {n:2d}: {status}  {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def line17():
    """1D, 17 unknowns, two cells sharing the middle node."""
    pen = assemble(GridMedium.homogeneous((19,), 1.0 / 18))
    P, S = regular_partition(pen, 2)
    return pen, P, S


@pytest.fixture(scope="session")
def square25():
    """2D 25x25 grid (23x23 unknowns), 2x2 cells, corner removed."""
    pen0 = assemble(GridMedium.homogeneous((25, 25), 1.0 / 24))
    P0, S0 = regular_partition(pen0, 2)
    pen, P, S = remove_corner_set(pen0, P0, S0)
    return pen0, P0, S0, pen, P, S
