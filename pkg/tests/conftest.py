import pytest

VERDICTS: dict[int, str] = {}


@pytest.fixture
def verdict(request):
    """Record a one-line verdict for an acceptance criterion: ``verdict(n, passed, detail)``."""

    def record(number: int, passed: bool, detail: str) -> bool:
        VERDICTS[number] = f"{'PASS' if passed else 'FAIL'}  criterion {number:>2}: {detail}"
        with request.config.pluginmanager.getplugin("capturemanager").global_and_fixture_disabled():
            print("\n" + VERDICTS[number])
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(VERDICTS):
            terminalreporter.write_line(VERDICTS[n])
