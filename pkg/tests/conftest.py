"""Acceptance reporting: one PASS/FAIL line per criterion after the run."""

import re

_CRITERION = re.compile(r"test_criterion_(\d+)")
_RESULTS: dict[int, tuple[str, str]] = {}


def pytest_runtest_logreport(report):
    m = _CRITERION.search(report.nodeid)
    if not m or (report.when != "call" and report.passed):
        return
    status = "PASS" if report.passed else ("SKIP" if report.skipped else "FAIL")
    detail = dict(report.user_properties).get("detail", "")
    n = int(m.group(1))
    if n not in _RESULTS or _RESULTS[n][0] == "PASS":
        _RESULTS[n] = (status, detail)


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_RESULTS):
        status, detail = _RESULTS[n]
        terminalreporter.write_line(f"criterion {n}: {status}" + (f"  {detail}" if detail else ""))
