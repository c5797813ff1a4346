import numpy as np
import pytest

from scorelab import autodiff as ad
from scorelab.nets import MlpConfig, ScoreNet, init


def central_diff(fn, theta, h=1e-6):
    """Central finite-difference gradient of a scalar function of a vector."""
    theta = np.array(theta, dtype=np.float64)
    out = np.empty_like(theta)
    for i in range(theta.size):
        e = np.zeros_like(theta)
        e[i] = h
        out[i] = (fn(theta + e) - fn(theta - e)) / (2 * h)
    return out


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))


@pytest.fixture(autouse=True)
def fresh_tape():
    ad.reset_default_tape()
    yield
    ad.reset_default_tape()


@pytest.fixture
def diag_net():
    return ScoreNet.linear(np.diag([-1.0, -2.0]))


@pytest.fixture
def small_mlp():
    return init(MlpConfig(2, hidden=(16, 16)), seed=3)


@pytest.fixture
def energy_mlp():
    return init(MlpConfig(2, hidden=(16, 16), mode="energy"), seed=5)


# one "criterion N: PASS|FAIL ..." line per acceptance criterion, echoed in the summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
