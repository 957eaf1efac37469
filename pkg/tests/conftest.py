import pytest

_LINES = {}


@pytest.fixture
def report():
    """Record one pass/fail line per acceptance criterion, printed in the terminal summary."""

    def _report(number, ok, detail):
        line = f"criterion {number:>2} {'PASS' if ok else 'FAIL'}: {detail}"
        _LINES[number] = line
        print(line)
        return ok

    return _report


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_LINES):
            terminalreporter.write_line(_LINES[n])
