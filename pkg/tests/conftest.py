import numpy as np
import pytest

from seqcal import gp
from seqcal.posterior import FieldExperiment, PriorSpec
from seqcal.testbeds import eval_sine2d


def sine_data(n, rng):
    X = rng.uniform(size=(n, 2))
    return X, eval_sine2d(X[:, 0], X[:, 1])


def random_kernel(rng, dim, nugget=1e-6):
    return gp.KernelParams(rng.uniform(0.0, 2.5, dim), rng.uniform(-1.0, 1.0), nugget)


def rel_err(a, b, scale):
    return np.max(np.abs(np.asarray(a) - np.asarray(b)) / np.maximum(np.abs(b), scale))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="module")
def sine_emulator():
    X, y = sine_data(15, np.random.default_rng(3))
    return gp.fit((X, y), gp.FitConfig(seed=1))


@pytest.fixture(scope="module")
def sine_field():
    rng = np.random.default_rng(5)
    xf = np.repeat([0.1, 0.3, 0.5, 0.7, 0.9], 2)
    y = eval_sine2d(xf, np.pi / 5) + 0.2 * rng.standard_normal(xf.size)
    return FieldExperiment.with_noise(xf, y, 0.04, PriorSpec.unit(1))


# one line per acceptance criterion, echoed at the end of the session
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
