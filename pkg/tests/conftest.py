import pytest

ACCEPTANCE: dict[str, tuple[bool, str]] = {}


@pytest.fixture
def record():
    """Record one acceptance verdict; printed in the terminal summary."""

    def _record(criterion: str, passed: bool, detail: str) -> bool:
        ACCEPTANCE[criterion] = (bool(passed), detail)
        print(f"{criterion} {'PASS' if passed else 'FAIL'}: {detail}")
        return passed

    return _record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(ACCEPTANCE, key=lambda n: int(n[1:])):
        passed, detail = ACCEPTANCE[name]
        terminalreporter.write_line(f"{name} {'PASS' if passed else 'FAIL'}: {detail}")
