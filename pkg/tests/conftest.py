import numpy as np
import pytest

from lvit.autodiff import Tensor

_ACCEPTANCE: list[tuple[str, str]] = []


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    name = dict(report.user_properties).get("acceptance")
    if name is not None:
        _ACCEPTANCE.append((name, "PASS" if report.outcome == "passed" else "FAIL"))


def pytest_runtest_setup(item):
    marker = item.get_closest_marker("acceptance")
    if marker is not None:
        item.user_properties.append(("acceptance", marker.args[0]))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, outcome in _ACCEPTANCE:
        terminalreporter.write_line(f"[{outcome}] {name}")


@pytest.fixture
def nprng():
    return np.random.default_rng(1234)


@pytest.fixture
def weighted_sum(nprng):
    """Scalar head ``sum(w * y)`` with fixed random weights, for VJP checks."""
    def make(shape):
        w = Tensor(nprng.uniform(-1, 1, shape))
        return lambda y: (y * w).sum()
    return make

