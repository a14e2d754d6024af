import pytest

CRITERIA = pytest.StashKey[dict]()


@pytest.fixture
def verdict(request):
    """Record a criterion outcome for the end-of-run summary, then assert it."""

    def record(number: int, name: str, ok: bool, detail: str = "") -> None:
        results = request.config.stash.setdefault(CRITERIA, {})
        if number in results:  # several checks feed one criterion
            _, prev_ok, prev_detail = results[number]
            results[number] = (name, prev_ok and bool(ok), f"{prev_detail}; {detail}")
        else:
            results[number] = (name, bool(ok), detail)
        assert ok, f"criterion {number} ({name}) failed: {detail}"

    return record


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash.get(CRITERIA, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        name, ok, detail = results[number]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {number:2d} {name}: {detail}")
