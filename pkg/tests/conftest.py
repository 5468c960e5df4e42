import pytest

RESULTS = []


@pytest.fixture
def criterion(request):
    """Record one acceptance line and fail the test if the check did not pass."""
    terminal = request.config.pluginmanager.getplugin("terminalreporter")

    def report(name, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'}  {name}: {detail}"
        RESULTS.append(line)
        if terminal is not None:
            terminal.write_line("")
            terminal.write_line(line)
        assert ok, line

    return report


def pytest_terminal_summary(terminalreporter):
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
