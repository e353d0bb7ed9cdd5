"""Collects acceptance verdicts and prints them after the run."""

import pytest

VERDICTS = []


@pytest.fixture
def verdict(capsys):
    """``verdict(number, ok, detail)`` records and prints one PASS/FAIL line."""

    def record(number, ok, detail):
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        VERDICTS.append((number, line))
        with capsys.disabled():
            print(f"\n{line}")
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(VERDICTS):
            terminalreporter.write_line(line)
