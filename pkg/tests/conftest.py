import pytest

_LINES: list[str] = []


@pytest.fixture
def verdict():
    """Record one PASS/FAIL line, print it, and assert on the outcome."""

    def record(number, title, ok, detail=""):
        """``ok=None`` records a skip."""
        tag = "SKIP" if ok is None else ("PASS" if ok else "FAIL")
        line = f"[{tag}] criterion {number}: {title}" + (f" ({detail})" if detail else "")
        _LINES.append(line)
        print(line)
        if ok is None:
            pytest.skip(detail)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in _LINES:
            terminalreporter.write_line(line)
