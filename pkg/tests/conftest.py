import pytest

_CRITERIA: dict[int, str] = {}


@pytest.fixture
def criterion():
    """Record a criterion verdict so the terminal summary prints one line per criterion."""

    def record(number: int, title: str, passed: bool, detail: str = ""):
        verdict = "PASS" if passed else "FAIL"
        _CRITERIA[number] = f"criterion {number:2d} {verdict}  {title}" + (f"  [{detail}]" if detail else "")
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        terminalreporter.write_line(_CRITERIA[number])
