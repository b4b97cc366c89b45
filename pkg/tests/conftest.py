from __future__ import annotations

import pytest

_acceptance = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[_acceptance] = {}


@pytest.fixture
def criterion(request):
    """Record one pass/fail line for an acceptance criterion and return the verdict."""

    def report(n: int, ok: bool, detail: str) -> bool:
        line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(line)
        request.config.stash[_acceptance][n] = line
        return ok

    return report


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_acceptance, {})
    if lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
