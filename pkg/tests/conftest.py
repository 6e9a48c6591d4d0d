import os
from math import comb

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from barytree.rational import RationalMap

settings.register_profile("default", deadline=None, max_examples=30,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("thorough", deadline=None, max_examples=200,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


def kostlan_map(rng, d):
    """Random degree-d map with Kostlan-scaled Gaussian coefficients (rotation invariant)."""
    s = np.sqrt([comb(d, k) for k in range(d + 1)])
    P = (rng.standard_normal(d + 1) + 1j * rng.standard_normal(d + 1)) * s
    Q = (rng.standard_normal(d + 1) + 1j * rng.standard_normal(d + 1)) * s
    return RationalMap(P, Q)


@pytest.fixture
def rng():
    return np.random.default_rng(20240517)


ACCEPTANCE_LINES = []


def record_criterion(number, ok, detail):
    """Log one acceptance line (also printed at the end of the run) and return ``ok``."""
    line = f"{'PASS' if ok else 'FAIL'} criterion {number:2d}: {detail}"
    print(line)
    ACCEPTANCE_LINES.append((number, line))
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
