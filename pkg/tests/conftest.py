"""Collects one pass/fail line per acceptance criterion for the terminal summary."""

import pytest

_RESULTS = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None or report.when != "call" and not (report.when == "setup" and report.failed):
        return
    number, title = marker.args
    notes = [str(v) for k, v in item.user_properties if k == "note"]
    _RESULTS[number] = ("PASS" if report.passed else "FAIL", title, notes)


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_RESULTS):
        status, title, notes = _RESULTS[number]
        terminalreporter.write_line(f"ACCEPTANCE {number} {status}: {title}")
        for note in notes:
            terminalreporter.write_line(f"    {note}")
