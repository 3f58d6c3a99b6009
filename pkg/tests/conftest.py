from __future__ import annotations

import re

_ACCEPTANCE: dict = {}


def pytest_runtest_logreport(report):
    m = re.search(r"test_acceptance\.py::test_criterion_(\d+)", report.nodeid)
    if not m or (report.when != "call" and report.passed):
        return
    detail = "; ".join(f"{k}={v}" for k, v in report.user_properties)
    prev = _ACCEPTANCE.get(int(m.group(1)))
    if prev is None or not report.passed:
        _ACCEPTANCE[int(m.group(1))] = ("PASS" if report.passed else "FAIL", detail or (prev or ("", ""))[1])


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance")
    for k in sorted(_ACCEPTANCE):
        status, detail = _ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k}: {status}  {detail}")
