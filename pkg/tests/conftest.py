import math

import numpy as np
import pytest

from pvfim.problem import example3_lipschitz, example3_problem

X_STAR = 1.5 * math.pi


@pytest.fixture(scope="session")
def prob():
    return example3_problem(0.5)


@pytest.fixture(scope="session")
def lip():
    return example3_lipschitz()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(RESULTS):
        ok, detail = RESULTS[key]
        terminalreporter.write_line(f"criterion {key}: {'PASS' if ok else 'FAIL'} - {detail}")
