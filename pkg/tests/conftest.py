import pytest

_LINES = {}


class AcceptanceLog:
    def record(self, criterion, passed, detail):
        line = f"criterion {criterion:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
        _LINES[criterion] = line
        print(line)
        return passed


@pytest.fixture(scope="session")
def acceptance():
    return AcceptanceLog()


def pytest_terminal_summary(terminalreporter):
    if not _LINES:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(_LINES, key=lambda c: (int(str(c).rstrip("abcdefgh")), str(c))):
        terminalreporter.write_line(_LINES[k])
