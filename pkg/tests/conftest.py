import pytest

# (number, title, passed, detail) recorded by tests/test_acceptance.py
ACCEPTANCE_RESULTS: list[tuple[int, str, bool, str]] = []


@pytest.fixture
def record_criterion():
    def record(number: int, title: str, passed: bool, detail: str) -> bool:
        ACCEPTANCE_RESULTS.append((number, title, bool(passed), detail))
        print(f"[{'PASS' if passed else 'FAIL'}] #{number} {title}: {detail}")
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number, title, passed, detail in sorted(ACCEPTANCE_RESULTS):
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] #{number} {title}: {detail}")
