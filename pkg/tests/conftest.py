import numpy as np
import pytest

from disperse import scenes

# acceptance lines collected by test_acceptance.py and printed at the end of the run
ACCEPTANCE = []


def record(number, title, passed, detail):
    ACCEPTANCE.append((number, title, bool(passed), detail))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, passed, detail in sorted(ACCEPTANCE):
        status = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"criterion {number:2d} {status}  {title}: {detail}")


@pytest.fixture
def sphere2():
    """One disk, center (0.5, 0.5), radius 0.2."""
    return scenes.single_sphere()


@pytest.fixture
def two_disk():
    return scenes.two_disk()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
