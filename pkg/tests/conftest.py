import pytest

CRITERIA: dict[str, str] = {}


@pytest.fixture
def criterion():
    """Record and assert one acceptance criterion: ``criterion(id, ok, detail)``."""

    def record(cid: str, ok: bool, detail: str):
        line = f"[{'PASS' if ok else 'FAIL'}] {cid}: {detail}"
        CRITERIA[cid] = line
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for cid in sorted(CRITERIA, key=lambda c: int(c.split()[0][1:])):
        terminalreporter.write_line(CRITERIA[cid])
