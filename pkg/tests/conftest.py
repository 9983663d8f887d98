from __future__ import annotations

import pytest

_KEY = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[_KEY] = {}


@pytest.fixture(scope="session")
def acceptance_log(request):
    """Record ``(passed, detail)`` per acceptance criterion for the summary."""
    log = request.config.stash[_KEY]

    def record(number: int, passed: bool, detail: str) -> None:
        log[number] = (bool(passed), detail)
        print(f"criterion {number}: {'PASS' if passed else 'FAIL'} | {detail}")

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    log = config.stash.get(_KEY, {})
    if not log:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(log):
        passed, detail = log[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'} | {detail}")
