import pytest

ACCEPTANCE_LINES = []


@pytest.fixture
def report():
    """Collect one PASS/FAIL line per acceptance criterion."""
    def add(line):
        ACCEPTANCE_LINES.append(line)
        print(line, flush=True)
    return add


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
