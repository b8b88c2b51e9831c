from pathlib import Path

import pytest

FIXTURES = Path(__file__).parent / "fixtures"
_ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def fixtures_dir():
    return FIXTURES


@pytest.fixture
def criterion_report():
    """Record a one-line verdict for an acceptance criterion; printed in the terminal summary."""

    def report(number, name, passed, detail=""):
        _ACCEPTANCE_LINES.append(f"criterion {number} [{'PASS' if passed else 'FAIL'}] {name}: {detail}")
        print(_ACCEPTANCE_LINES[-1])
        return passed

    return report


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
