import pytest

_CRITERIA: dict[int, str] = {}


@pytest.fixture
def report():
    """Record one summary line per acceptance criterion."""
    def record(number: int, passed: bool, detail: str) -> bool:
        _CRITERIA[number] = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
        print(_CRITERIA[number])
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for number in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[number])
