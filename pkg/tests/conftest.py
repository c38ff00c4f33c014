import pytest

_LINES: list = []


@pytest.fixture
def record():
    """Log one acceptance line; printed in the terminal summary."""
    def _record(label: str, ok: bool, detail: str = "") -> bool:
        _LINES.append(f"[{'PASS' if ok else 'FAIL'}] {label}: {detail}")
        return ok
    return _record


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in _LINES:
            terminalreporter.write_line(line)
