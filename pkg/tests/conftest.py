import numpy as np
import pytest

from robust_rmdp import _backend
from robust_rmdp.core import TabularRMDP

AVAILABLE_BACKENDS = ["python"]
try:
    _backend.get_kernels("cython")
    AVAILABLE_BACKENDS.insert(0, "cython")
except ImportError:
    pass


@pytest.fixture(params=AVAILABLE_BACKENDS)
def backend(request, monkeypatch):
    """Run a test once per available kernel backend."""
    monkeypatch.setattr(_backend, "kernels", _backend.get_kernels(request.param))
    return request.param


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def two_state(rho=0.2, gamma=0.9, fail_state=None):
    kernel = np.array(
        [
            [[0.7, 0.3], [0.2, 0.8]],
            [[0.4, 0.6], [0.9, 0.1]],
        ]
    )
    reward = np.array([[1.0, 0.3], [0.0, 0.6]])
    return TabularRMDP(kernel, reward, gamma, [0.6, 0.4], rho, fail_state)


@pytest.fixture
def small_rmdp():
    return two_state()


# one line per acceptance criterion, printed after the test summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
