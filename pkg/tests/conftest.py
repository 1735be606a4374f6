import numpy as np
import pytest

from featvis import ToyCNN
from featvis.synthetic import grating_images

# pass/fail lines collected by the acceptance tests, echoed after the run
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def toy_model():
    return ToyCNN(seed=7)


@pytest.fixture(scope="session")
def grating_set():
    """30 phase-randomized grating images, 3 classes of 10."""
    return grating_images(n_per_class=10, n_classes=3, size=16, seed=0)


def rel_err(analytic: np.ndarray, reference: np.ndarray) -> float:
    """Max absolute error relative to the reference's largest magnitude."""
    analytic = np.asarray(analytic, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    return float(np.max(np.abs(analytic - reference))
                 / max(np.max(np.abs(reference)), 1e-12))
