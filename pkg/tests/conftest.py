import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def ramp(dims, coeffs, spacing=(1.0, 1.0, 1.0)):
    """Affine field sum_i coeffs[i] * x_i (coordinates in mm)."""
    g = np.indices(dims, dtype=np.float64)
    return sum(c * g[i] * spacing[i] for i, c in enumerate(coeffs))


_ACCEPTANCE_LINES = []


@pytest.fixture
def verdict():
    """Record one PASS/FAIL line, shown in the terminal summary."""
    def record(number, ok, detail):
        _ACCEPTANCE_LINES.append(f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}")
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
