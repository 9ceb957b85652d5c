import re

import pytest

_LINES = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_LINES] = []


@pytest.fixture
def verdict(request):
    """``verdict(ok, detail)`` records one PASS/FAIL line for an acceptance criterion."""
    lines = request.config.stash[_LINES]
    m = re.match(r"test_c(\d+)_(.*)", request.node.name)
    label = f"criterion {int(m.group(1)):2d} ({m.group(2).replace('_', ' ')})" if m else request.node.name
    seen = []

    def check(ok, detail):
        seen.append(ok)
        lines.append(f"{'PASS' if ok else 'FAIL'}  {label}: {detail}")
        assert ok, detail

    yield check
    if not seen:
        lines.append(f"FAIL  {label}: raised before reaching a verdict")


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: s.split("criterion")[-1]):
            terminalreporter.write_line(line)
