import os
import sys

import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("repo", deadline=None,
                          suppress_health_check=[HealthCheck.too_slow,
                                                 HealthCheck.function_scoped_fixture])
settings.load_profile("repo")

sys.path.insert(0, os.path.dirname(__file__))


@pytest.fixture
def tmpfile(tmp_path):
    """Factory for paths inside the per-test temp dir."""
    def make(name="w.img"):
        return str(tmp_path / name)
    return make


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def acceptance():
    """``acceptance(n, ok, detail)`` records one verdict line for the summary."""
    def report(n, ok, detail):
        line = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok
    return report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
