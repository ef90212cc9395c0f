import numpy as np
import pytest

from nexume.kernels import _backend

BACKENDS = _backend.available()


@pytest.fixture(params=sorted(BACKENDS))
def backend(request):
    return BACKENDS[request.param]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_VERDICTS = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, name, limit_s): acceptance criterion with a runtime limit")


def pytest_runtest_logreport(report):
    crit = getattr(report, "criterion", None)
    if crit is None:
        return
    # a failure in setup or call decides the verdict; the call phase carries the duration
    if report.when == "call" or report.failed or report.skipped:
        prev = _VERDICTS.get(crit[0])
        if prev is None or prev[1] == "PASS":
            _VERDICTS[crit[0]] = (crit, report.outcome.upper().replace("PASSED", "PASS").replace("FAILED", "FAIL"), report.duration)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    mark = item.get_closest_marker("criterion")
    if mark is not None:
        outcome.get_result().criterion = mark.args


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_VERDICTS):
        (n, name, limit), verdict, dur = _VERDICTS[num]
        terminalreporter.write_line(f"criterion {n:>2} {verdict:<7} {name} ({dur:.2f} s, limit {limit} s)")
