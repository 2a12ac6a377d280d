import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# -- acceptance summary ---------------------------------------------------------------

ACCEPTANCE = {}


@pytest.fixture
def record():
    """Store a criterion outcome for the end-of-run summary."""

    def _record(n, ok, details):
        ACCEPTANCE[n] = (bool(ok), details)
        print(f"CRITERION {n}: {'PASS' if ok else 'FAIL'} | {details}")

    return _record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, details = ACCEPTANCE[n]
        terminalreporter.write_line(f"CRITERION {n}: {'PASS' if ok else 'FAIL'} | {details}")
