import pytest

_LINES = []


@pytest.fixture
def criterion(request):
    """Call ``criterion(n, ok, detail)`` once per acceptance criterion."""

    def report(n, ok, detail=""):
        _LINES.append((n, bool(ok), detail))
        return ok

    return report


def pytest_terminal_summary(terminalreporter):
    if not _LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n, ok, detail in sorted(_LINES, key=lambda x: x[0]):
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
