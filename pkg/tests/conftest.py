import pytest

ACCEPTANCE = {}


@pytest.fixture
def record():
    """``record(n, passed, detail)`` stores one acceptance line for the summary."""

    def _record(n, passed, detail):
        ACCEPTANCE[n] = (bool(passed), detail)
        return bool(passed)

    return _record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
