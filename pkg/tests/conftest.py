import numpy as np
import pytest
from hypothesis import HealthCheck, settings, strategies as st

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

seeds = st.integers(min_value=0, max_value=2**32 - 1)
probs = st.floats(min_value=0.0, max_value=1.0, allow_nan=False)
open_probs = st.floats(min_value=0.02, max_value=0.98, allow_nan=False)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES: list = []


def record(k: int, ok: bool, detail: str) -> bool:
    """Log one acceptance verdict for the terminal summary."""
    line = f"{'PASS' if ok else 'FAIL'} criterion {k}: {detail}"
    ACCEPTANCE_LINES.append((k, line))
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
