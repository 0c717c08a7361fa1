import pytest

_RESULTS: list = []


@pytest.fixture
def record():
    """Log one acceptance verdict; the terminal summary prints them all."""
    def _record(name: str, passed: bool, detail: str) -> bool:
        _RESULTS.append((name, bool(passed), detail))
        print(f"{'PASS' if passed else 'FAIL'}  {name}: {detail}")
        return passed
    return _record


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, passed, detail in _RESULTS:
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {name}: {detail}")
