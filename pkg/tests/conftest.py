import pytest

_RESULTS: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def criterion():
    """Record one acceptance line; call as ``criterion(n, ok, detail)``."""
    def record(n: int, ok: bool, detail: str = "") -> bool:
        _RESULTS[n] = (bool(ok), detail)
        print(f"CRITERION {n}: {'PASS' if ok else 'FAIL'} {detail}")
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_RESULTS):
        ok, detail = _RESULTS[n]
        terminalreporter.write_line(f"CRITERION {n}: {'PASS' if ok else 'FAIL'} {detail}")
