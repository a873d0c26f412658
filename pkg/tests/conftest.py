"""Collects one pass/fail line per acceptance criterion and prints them at the end of the run."""

import pytest

_RESULTS = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when != "call" and not (report.when == "setup" and report.failed):
        return
    n = marker.args[0]
    detail = getattr(item, "criterion_detail", "")
    prev = _RESULTS.get(n)
    passed = report.passed and (prev is None or prev[0])
    _RESULTS[n] = (passed, "; ".join(x for x in ((prev or (None, ""))[1], detail) if x))


@pytest.fixture
def record(request):
    """Attach a short measurement summary to the criterion line."""

    def _record(text):
        request.node.criterion_detail = text

    return _record


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_RESULTS):
        passed, detail = _RESULTS[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if passed else 'FAIL'}" + (f"  ({detail})" if detail else ""))
