"""Prints one PASS/FAIL line per acceptance criterion at the end of the run.

Acceptance tests are named ``test_criterion_<n>_<slug>`` and may attach
short measurements through the built-in ``record_property`` fixture.
"""

import re

_CRITERION = re.compile(r"test_criterion_(\d+)_(\w+)")
_results: dict[int, dict] = {}


def pytest_runtest_logreport(report):
    m = _CRITERION.search(report.nodeid)
    if not m:
        return
    n = int(m.group(1))
    entry = _results.setdefault(n, {"name": m.group(2).replace("_", " "), "passed": True, "props": []})
    if report.when == "call" or report.outcome != "passed":
        entry["passed"] &= report.outcome == "passed"
    if report.when == "call":
        entry["props"] += [f"{k}={v}" for k, v in report.user_properties]


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(_results):
        e = _results[n]
        status = "PASS" if e["passed"] else "FAIL"
        detail = ("  " + " ".join(e["props"])) if e["props"] else ""
        tr.write_line(f"[{status}] criterion {n}: {e['name']}{detail}")
