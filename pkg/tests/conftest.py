import numpy as np
import pytest
from hypothesis import HealthCheck, settings
from hypothesis import strategies as st

settings.register_profile("default", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def unit_vectors(dim):
    """Hypothesis strategy for unit vectors of ``dim`` components."""
    comp = st.floats(-1.0, 1.0, allow_nan=False)
    return (
        st.lists(comp, min_size=dim, max_size=dim)
        .map(np.array)
        .filter(lambda v: np.linalg.norm(v) > 1e-3)
        .map(lambda v: v / np.linalg.norm(v))
    )


def vectors(dim, bound=3.0):
    comp = st.floats(-bound, bound, allow_nan=False)
    return st.lists(comp, min_size=dim, max_size=dim).map(np.array)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES = []


def acceptance_line(number, title, ok, detail):
    """Record and print one pass/fail line of the acceptance suite."""
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {title} | {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
