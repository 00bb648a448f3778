import pytest

# acceptance tests append (label, passed, detail) here; printed once at the end
CRITERIA: list = []


@pytest.fixture
def record():
    def add(label: str, passed: bool, detail: str = ""):
        CRITERIA.append((label, bool(passed), detail))
        print(f"{'PASS' if passed else 'FAIL'}  {label}  {detail}")
        return passed

    return add


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for label, passed, detail in CRITERIA:
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {label}  {detail}")
