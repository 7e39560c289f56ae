import pytest

_VERDICTS = pytest.StashKey[list]()


@pytest.fixture
def verdict(request):
    """Record one acceptance line; the assertion is left to the caller."""
    lines = request.config.stash.setdefault(_VERDICTS, [])

    def record(number, title, ok, detail):
        line = f"[{'PASS' if ok else 'FAIL'}] #{number:<2} {title}: {detail}"
        print(line)
        lines.append((number, line))
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_VERDICTS, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
