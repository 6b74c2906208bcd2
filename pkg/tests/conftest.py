import numpy as np
import pytest
from hypothesis import settings

from pfpdecomp.apfp import ApfpConfig, run_apfp
from pfpdecomp.simulator import Scenario, SimConfig

settings.register_profile("default", deadline=None, max_examples=100)
settings.load_profile("default")


@pytest.fixture(scope="session")
def scenario():
    return Scenario.build(SimConfig(), seed=1)


@pytest.fixture(scope="session")
def clean_segment(scenario):
    return scenario.segment(100)


@pytest.fixture(scope="session")
def clean_decomposition(clean_segment):
    return run_apfp(clean_segment[0], ApfpConfig(), seed=1)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_ACCEPTANCE = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_ACCEPTANCE] = []


@pytest.fixture
def criterion(request):
    """Record one pass/fail line for the acceptance summary."""
    lines = request.config.stash[_ACCEPTANCE]

    def record(number: int, ok: bool, detail: str) -> bool:
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        lines.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
