import os
import re
import sys

sys.path.insert(0, os.path.dirname(__file__))

_CRITERIA = {}


def pytest_runtest_logreport(report):
    m = re.search(r"test_acceptance\.py::test_criterion_(\d+)_(\w+)", report.nodeid)
    if not m:
        return
    key = (int(m.group(1)), m.group(2))
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        _CRITERIA[key] = report.outcome


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    notes = getattr(sys.modules.get("test_acceptance"), "NOTES", {})
    tr = terminalreporter
    tr.section("acceptance criteria")
    for (num, name), outcome in sorted(_CRITERIA.items()):
        status = {"passed": "PASS", "skipped": "SKIP"}.get(outcome, "FAIL")
        tr.write_line(f"criterion {num} {status}  {name.replace('_', ' ')}")
        for text in notes.get(num, []):
            tr.write_line(f"    {text}")
