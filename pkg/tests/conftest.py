import sys

import numpy as np
import pytest

from spherelift.icosphere import build_hierarchy


@pytest.fixture(scope="session")
def h4():
    return build_hierarchy(4)


@pytest.fixture(scope="session")
def h3():
    return build_hierarchy(3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    lines = getattr(mod, "RESULTS", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[2])):
            terminalreporter.write_line(line)
