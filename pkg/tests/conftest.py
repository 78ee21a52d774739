import pytest

CRITERIA = [f"A{i}" for i in range(1, 13)]
_results: dict[str, tuple[bool, str]] = {}


@pytest.fixture
def criterion():
    """Record the outcome of one acceptance criterion for the end-of-run summary."""

    def record(name: str, ok: bool, detail: str = "") -> bool:
        _results[name] = (bool(ok), detail)
        return bool(ok)

    return record


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for name in CRITERIA:
        if name in _results:
            ok, detail = _results[name]
            terminalreporter.write_line(f"{name}: {'PASS' if ok else 'FAIL'}  {detail}")
        else:
            terminalreporter.write_line(f"{name}: NOT RUN  (deselected or errored before recording)")
