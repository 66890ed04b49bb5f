import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by the test")


def pytest_collection_finish(session):
    for item in session.items:
        mark = item.get_closest_marker("criterion")
        if mark is not None:
            number, title = mark.args
            _CRITERIA.setdefault(number, {"title": title, "outcomes": [], "details": []})


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        entry = _CRITERIA[mark.args[0]]
        entry["outcomes"].append(report.outcome)
        text = "\n".join(line for line in report.capstdout.splitlines() if line.strip())
        if text:
            entry["details"].append(text)


def pytest_terminal_summary(terminalreporter):
    if not any(e["outcomes"] for e in _CRITERIA.values()):
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        entry = _CRITERIA[number]
        outcomes = entry["outcomes"]
        if not outcomes:
            verdict = "NOT RUN"
        elif any(o == "failed" for o in outcomes):
            verdict = "FAIL"
        elif all(o == "passed" for o in outcomes):
            verdict = "PASS"
        else:
            verdict = "SKIPPED"
        terminalreporter.write_line(f"criterion {number:2d}: {verdict:7s} {entry['title']}")
        for text in entry["details"]:
            terminalreporter.write_line(text)
