import pytest

# filled by the acceptance suite: (label, passed, detail)
ACCEPTANCE_LINES = []


@pytest.fixture
def criterion():
    """Record one acceptance line; call with (label, passed, detail) before asserting."""
    def record(label, passed, detail=""):
        line = f"[{'PASS' if passed else 'FAIL'}] {label}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
