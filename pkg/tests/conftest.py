"""Collects one pass/fail line per acceptance criterion and prints them at the end."""

import pytest

ACCEPTANCE_LINES = {}


@pytest.fixture
def criterion(request):
    """Call ``criterion(n, passed, detail)``; the line is echoed and kept for the summary."""

    def record(number: int, passed: bool, detail: str) -> None:
        line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES[number] = line
        print(line)
        assert passed, line

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[number])
