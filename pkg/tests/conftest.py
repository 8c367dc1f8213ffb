import pytest

ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def criterion():
    """Record one acceptance verdict, print it, then assert it."""
    def record(number: int, ok: bool, detail: str) -> None:
        ACCEPTANCE[number] = (bool(ok), detail)
        print(f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}")
        assert ok, detail
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {n:>2}: {detail}")
