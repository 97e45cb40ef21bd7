import time

import pytest

from mcmsim.config import config_from_dict
from mcmsim.scenarios import run_scenario

_ACCEPTANCE: list[tuple[str, bool, str]] = []
_RUNS: dict = {}


def default_run(scenario: str):
    """Run a scenario at its default configuration once per session; returns (log, seconds)."""
    if scenario not in _RUNS:
        t0 = time.perf_counter()
        log = run_scenario(config_from_dict({}, scenario))
        _RUNS[scenario] = (log, time.perf_counter() - t0)
    return _RUNS[scenario]


@pytest.fixture(scope="session")
def scenario_run():
    return default_run


@pytest.fixture
def record():
    """Record one acceptance criterion; the line is printed in the terminal summary."""

    def _record(name: str, passed: bool, detail: str = "") -> bool:
        _ACCEPTANCE.append((name, bool(passed), detail))
        return bool(passed)

    return _record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, passed, detail in _ACCEPTANCE:
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {name}  {detail}")
