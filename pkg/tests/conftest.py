import pytest

_VERDICTS: list[str] = []


class Recorder:
    def __call__(self, label: str, ok: bool, detail: str = "") -> bool:
        line = f"{'PASS' if ok else 'FAIL'} {label}" + (f": {detail}" if detail else "")
        _VERDICTS.append(line)
        print(line)
        return ok


@pytest.fixture
def verdict():
    """Record one acceptance verdict line; the test still asserts on the result."""
    return Recorder()


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in _VERDICTS:
            terminalreporter.write_line(line)
