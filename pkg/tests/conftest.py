import pytest

_VERDICTS: dict[int, str] = {}


@pytest.fixture
def verdict():
    """Records one PASS/FAIL line per acceptance criterion, then asserts it."""

    def record(criterion: int, ok: bool, detail: str) -> None:
        line = f"criterion {criterion:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        _VERDICTS[criterion] = line
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for key in sorted(_VERDICTS):
            terminalreporter.write_line(_VERDICTS[key])
