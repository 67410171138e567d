import pytest

_LINES = []


@pytest.fixture(scope="session")
def record_criterion():
    """Collect one PASS/FAIL line per acceptance criterion.

    Lines print immediately (visible under -s) and again in the terminal
    summary so a plain pytest run still shows the scoreboard.
    """
    def _record(num, name, ok, detail):
        line = (f"criterion {num:2d} [{name}]: "
                f"{'PASS' if ok else 'FAIL'} ({detail})")
        _LINES.append(line)
        print(line, flush=True)
        return ok
    return _record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in _LINES:
            terminalreporter.write_line(line)
