from __future__ import annotations

import re

_CRITERIA: dict[int, tuple[str, str]] = {}


def pytest_runtest_logreport(report):
    m = re.search(r"test_acceptance\.py::test_c(\d+)_", report.nodeid)
    if not m or (report.when != "call" and not (report.when == "setup" and report.failed)):
        return
    detail = dict(report.user_properties).get("measured", "")
    _CRITERIA[int(m.group(1))] = ("PASS" if report.passed else "FAIL", detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        status, detail = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:2d}: {status}  {detail}".rstrip())
