import pytest

# (criterion, passed, detail) recorded by the acceptance suite
ACCEPTANCE_RESULTS: list[tuple[str, bool, str]] = []


@pytest.fixture
def record():
    def _record(name: str, passed: bool, detail: str = "") -> bool:
        line = f"{'PASS' if passed else 'FAIL'} {name}: {detail}"
        print(line)
        ACCEPTANCE_RESULTS.append((name, passed, detail))
        return passed

    return _record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, passed, detail in ACCEPTANCE_RESULTS:
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'} {name}: {detail}")
