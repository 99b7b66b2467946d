import time

import pytest

from ivmrisk import experiment as ex

_criteria = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    number, title = mark.args
    if report.when == "call" or (report.when == "setup" and report.failed):
        _criteria[number] = (title, "PASS" if report.passed else "FAIL")


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        title, verdict = _criteria[number]
        terminalreporter.write_line(f"criterion {number:2d} {verdict}: {title}")


@pytest.fixture(scope="session")
def reproduce_runs(tmp_path_factory):
    """Two default reproduction runs with the same seed; returns (dirs, seconds)."""
    dirs, seconds = [], []
    for name in ("run_a", "run_b"):
        out = tmp_path_factory.mktemp(name)
        cfg = ex.load_config(None, {"out": str(out)})
        t0 = time.perf_counter()
        ex.cmd_reproduce(cfg)
        seconds.append(time.perf_counter() - t0)
        dirs.append(out)
    return dirs, seconds
