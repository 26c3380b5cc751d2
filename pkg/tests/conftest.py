"""Shared fixtures and the acceptance verdict summary."""

from __future__ import annotations

VERDICTS: dict[int, str] = {}


def record_verdict(criterion: int, passed: bool, detail: str) -> None:
    line = f"criterion {criterion:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
    VERDICTS[criterion] = line
    print(line)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(VERDICTS):
        terminalreporter.write_line(VERDICTS[k])
