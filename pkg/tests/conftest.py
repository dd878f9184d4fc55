import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    n = mark.args[0]
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        status = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}[report.outcome]
        detail = ""
        if report.outcome == "skipped" and isinstance(report.longrepr, tuple):
            detail = report.longrepr[2].removeprefix("Skipped: ")
        _CRITERIA.setdefault(n, []).append((status, detail))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        results = _CRITERIA[n]
        statuses = {s for s, _ in results}
        status = next(s for s in ("FAIL", "PASS", "SKIP") if s in statuses)
        notes = sorted({d for s, d in results if s == "SKIP" and d})
        line = f"criterion {n}: {status}"
        if status != "SKIP" and "SKIP" in statuses:
            line += " (partial)"
        if notes:
            line += " [" + "; ".join(notes) + "]"
        terminalreporter.write_line(line)
