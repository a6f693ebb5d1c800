import pytest

_LINES = []


@pytest.fixture
def report():
    """Record one summary line for an acceptance criterion."""

    def add(number, passed, detail):
        _LINES.append((number, f"{'PASS' if passed else 'FAIL'}  criterion {number:>2}: {detail}"))
        return passed

    return add


def pytest_terminal_summary(terminalreporter):
    if not _LINES:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(_LINES):
        terminalreporter.write_line(line)
