import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from ldmi.data import apply_k_core, build_log, split_chronological
from ldmi.fixture import BUNDLED_DIR, BUNDLED_FIXTURE, make_planted_fixture

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def bundled_dir():
    return BUNDLED_DIR


@pytest.fixture(scope="session")
def small_log():
    fx = make_planted_fixture(**BUNDLED_FIXTURE)
    log = build_log(apply_k_core(fx.events, 5))
    return log, split_chronological(log)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: dict[int, str] = {}


@pytest.fixture
def criterion():
    """Record the one-line verdict of an acceptance criterion."""

    def record(number: int, passed: bool, detail: str) -> bool:
        line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES[number] = line
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
