import time

import pytest

SUITE_LIMIT_SECONDS = 300.0

_results: dict[int, tuple[bool, str]] = {}
_start = time.monotonic()


@pytest.fixture
def acceptance():
    """Record one acceptance criterion as (passed, detail) for the end-of-run summary."""

    def record(number: int, passed: bool, detail: str) -> bool:
        _results[number] = (bool(passed), detail)
        return bool(passed)

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _results:
        return
    elapsed = time.monotonic() - _start
    failed = len(terminalreporter.stats.get("failed", [])) + len(terminalreporter.stats.get("error", []))
    terminalreporter.section("acceptance criteria")
    for number in sorted(_results):
        passed, detail = _results[number]
        if number == 8:
            # the property suite also requires the whole run to be green and fast
            suite_ok = failed == 0 and elapsed < SUITE_LIMIT_SECONDS
            detail += f"; suite {elapsed:.0f}s, {failed} failed"
            passed = passed and suite_ok
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")
