import pytest

_ACCEPTANCE_LINES = {}


@pytest.fixture(scope="session")
def acceptance_log():
    """Record ``(criterion number, CheckResult)`` for the end-of-run summary."""

    def record(number, check):
        _ACCEPTANCE_LINES[number] = f"[{number}] {check.line()}"
        print(_ACCEPTANCE_LINES[number])
        return check

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE_LINES):
        terminalreporter.write_line(_ACCEPTANCE_LINES[number])
