from __future__ import annotations

import numpy as np
import pytest

from bealab.problems import make_logistic, make_quadratic, make_rng, quadratic_from_arrays

# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE_RESULTS: dict = {}


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_RESULTS):
        passed, detail = ACCEPTANCE_RESULTS[key]
        terminalreporter.write_line(f"criterion {key:2d}: {'PASS' if passed else 'FAIL'}  {detail}")


@pytest.fixture
def rng():
    return make_rng(12345)


@pytest.fixture(scope="session")
def quad():
    return make_quadratic(3, 4, 7)


@pytest.fixture(scope="session")
def logistic():
    return make_logistic(2, 8, 3)


@pytest.fixture(scope="session")
def half_square():
    """E(θ) = ½θ² as a one-example problem."""
    return quadratic_from_arrays([1.0], [0.0], "half_square")


@pytest.fixture(scope="session")
def two_centers():
    """Two 1-D unit quadratics centred at 0 and 2."""
    return quadratic_from_arrays([1.0, 1.0], [0.0, 2.0], "two_centers")


def random_points(rng, dim, count, scale=1.0):
    return [scale * rng.standard_normal(dim) for _ in range(count)]


def assert_close(a, b, tol):
    a, b = np.asarray(a, float), np.asarray(b, float)
    assert np.max(np.abs(a - b), initial=0.0) <= tol, (a, b)
