import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")

# criterion number -> (passed, description, measurement)
ACCEPTANCE: dict[int, tuple[bool, str, str]] = {}


@pytest.fixture
def gen():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(ACCEPTANCE):
        ok, desc, measured = ACCEPTANCE[num]
        terminalreporter.write_line(f"[{num:2d}] {'PASS' if ok else 'FAIL'}  {desc}: {measured}")
