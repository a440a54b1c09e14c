"""Collects one PASS/FAIL line per acceptance criterion and prints them at the end of the run."""

import pytest

RESULTS = {}


class Recorder:
    def __init__(self, number):
        self.number = number

    def __call__(self, ok, detail):
        RESULTS[self.number] = (bool(ok), detail)
        line = f"criterion {self.number}: {'PASS' if ok else 'FAIL'} - {detail}"
        print(line)
        return ok


@pytest.fixture
def criterion(request):
    marker = request.node.get_closest_marker("criterion")
    return Recorder(marker.args[0])


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


def pytest_terminal_summary(terminalreporter):
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(RESULTS):
        ok, detail = RESULTS[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'} - {detail}")
