import os
import sys

sys.path.insert(0, os.path.dirname(__file__))

# Acceptance tests are named test_cNN_<slug>; their outcomes are collected
# here and printed as one line per criterion at the end of the session.
_criteria = {}


def _criterion(nodeid):
    if "test_acceptance.py::" not in nodeid:
        return None
    name = nodeid.split("::")[-1]
    if not name.startswith("test_c"):
        return None
    number, _, slug = name[len("test_c"):].partition("_")
    return int(number), slug.replace("_", " ")


def pytest_runtest_logreport(report):
    key = _criterion(report.nodeid)
    if key is None:
        return
    if report.when == "call" or report.failed or report.skipped:
        prev = _criteria.get(key)
        if prev is None or prev[0] == "PASS":
            outcome = "PASS" if report.passed else ("SKIP" if report.skipped else "FAIL")
            detail = "; ".join(str(v) for k, v in report.user_properties if k == "detail")
            _criteria[key] = (outcome, report.duration, detail)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for (number, slug), (outcome, duration, detail) in sorted(_criteria.items()):
        line = f"C{number:<2} {outcome}  {slug}  ({duration:.1f}s)"
        terminalreporter.write_line(f"{line}  {detail}" if detail else line)
