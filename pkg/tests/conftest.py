from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

from shadowprice.instances import fixture_b1, fixture_b2

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile("default")

FIXTURES = Path(__file__).resolve().parent.parent / "fixtures"


@pytest.fixture
def b1():
    return fixture_b1()


@pytest.fixture
def b2():
    return fixture_b2()


@pytest.fixture
def fixtures_dir():
    return FIXTURES


def rng_for(seed):
    return np.random.default_rng(seed)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = next((m for name, m in sys.modules.items() if name.endswith("test_acceptance")), None)
    lines = getattr(mod, "RESULTS", None)
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(lines):
        terminalreporter.write_line(lines[n])
