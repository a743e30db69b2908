import pytest

_CRITERIA: dict[int, str] = {}


def record_criterion(number: int, status: str, detail: str) -> None:
    line = f"criterion {number:>2}: {status:<6} {detail}"
    _CRITERIA[number] = line
    print(line)


@pytest.fixture
def criterion():
    """Record a criterion's outcome and fail the test when it does not pass."""

    def check(number: int, ok: bool, detail: str):
        record_criterion(number, "PASS" if ok else "FAIL", detail)
        assert ok, f"criterion {number} failed: {detail}"

    return check


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        terminalreporter.write_line(_CRITERIA[number])
