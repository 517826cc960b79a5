import time

import numpy as np
import pytest

_RESULTS = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.fixture
def rng():
    return np.random.default_rng(20240501)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        number, title = marker.args
        detail = ""
        if report.outcome == "failed" and call.excinfo is not None:
            detail = str(call.excinfo.value).strip().splitlines()[0][:160]
        _RESULTS[(number, item.name)] = (title, report.outcome, report.duration, detail)


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for (number, _name), (title, outcome, duration, detail) in sorted(_RESULTS.items()):
        status = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}.get(outcome, outcome)
        line = f"criterion {number:>2} {status}  {title} ({duration:.1f}s)"
        if detail:
            line += f"  -- {detail}"
        tr.write_line(line)


class Timer:
    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.elapsed = time.perf_counter() - self.t0
        return False


@pytest.fixture
def timer():
    return Timer
