import re

import pytest

ACCEPTANCE = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[ACCEPTANCE] = {}


@pytest.fixture
def report(request):
    """Record one pass/fail line for an acceptance criterion."""
    lines = request.config.stash[ACCEPTANCE]

    def _report(key, ok, detail):
        lines[key] = f"criterion {key}: {'PASS' if ok else 'FAIL'} - {detail}"
        print(lines[key])
        return ok

    return _report


def _order(key):
    m = re.match(r"(\d+)(.*)", key)
    return int(m.group(1)), m.group(2)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash[ACCEPTANCE]
    if lines:
        terminalreporter.section("acceptance criteria")
        for key in sorted(lines, key=_order):
            terminalreporter.write_line(lines[key])
