"""Acceptance bookkeeping: tests marked ``criterion(n, title)`` are folded into
one PASS/FAIL line per criterion at the end of the session."""
import pytest

_results = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion this test checks")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    number, title = mark.args
    entry = _results.setdefault(number, {"title": title, "ok": True, "ran": False, "notes": []})
    if report.when == "call" or report.failed or report.skipped:
        if report.skipped:
            entry["notes"].append(f"{item.name}: skipped")
            entry["ok"] = False
            return
        entry["ran"] = entry["ran"] or report.when == "call"
        if report.failed:
            entry["ok"] = False
            entry["notes"].append(f"{item.name}: failed ({report.when})")
    if report.when == "call":
        entry["notes"].extend(f"{item.name}: {v}" for k, v in item.user_properties if k == "detail")


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for number in sorted(_results):
        r = _results[number]
        status = "PASS" if r["ok"] and r["ran"] else "FAIL"
        tr.write_line(f"[{status}] criterion {number}: {r['title']}")
        for note in r["notes"]:
            tr.write_line(f"         {note}")
