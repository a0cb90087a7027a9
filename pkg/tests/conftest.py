"""Shared pytest plumbing: the acceptance-criteria reporter.

Each acceptance test records exactly one PASS/FAIL line; the collected lines
are echoed in a dedicated section at the end of the run so the verdict for
every criterion is visible even when all tests pass.
"""

import pytest

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def acceptance():
    """Record one criterion verdict; fails the test when ``ok`` is false."""

    def record(criterion: str, ok: bool, detail: str = "") -> None:
        verdict = "PASS" if ok else "FAIL"
        line = f"[{verdict}] {criterion}"
        if detail:
            line += f" — {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
