import numpy as np
import pytest
from hypothesis import settings

from bilab.grid import DomainSpec, build_grid

settings.register_profile("bilab", deadline=None, max_examples=40)
settings.load_profile("bilab")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def box2():
    return build_grid(DomainSpec.box([-1, -1], [1, 1]), 17)


@pytest.fixture
def ball2():
    return build_grid(DomainSpec.ball([0, 0], 1.0), 21)


@pytest.fixture
def box3():
    return build_grid(DomainSpec.box([0, 0, 0], [1, 1, 1]), 9)


_CRITERIA = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[_CRITERIA] = {}


@pytest.fixture
def criterion(request):
    """record(n, passed, detail) stores one acceptance line for the terminal summary."""
    table = request.config.stash[_CRITERIA]

    def record(n: int, passed: bool, detail: str) -> None:
        prev = table.get(n)
        if prev is not None:
            passed = passed and prev[0]
            detail = f"{prev[1]}; {detail}"
        table[n] = (bool(passed), detail)

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    table = config.stash.get(_CRITERIA, {})
    if not table:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(table):
        passed, detail = table[n]
        terminalreporter.write_line(f"CRITERION {n:>2}: {'PASS' if passed else 'FAIL'}  {detail}")
