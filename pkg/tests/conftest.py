"""Per-criterion PASS/FAIL summary for the acceptance suite."""

from collections import defaultdict

_results = defaultdict(list)


def pytest_runtest_logreport(report):
    marker = dict(report.user_properties).get("criterion")
    if marker is None:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        xfail = hasattr(report, "wasxfail")
        notes = [f"{k}={v}" for k, v in report.user_properties if k != "criterion"]
        _results[marker].append((report.nodeid.split("::")[-1], report.outcome, xfail, notes))


def pytest_itemcollected(item):
    m = item.get_closest_marker("criterion")
    if m is not None:
        item.user_properties.append(("criterion", m.args[0]))


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for crit in sorted(_results):
        rows = _results[crit]
        ok = all(outcome == "passed" and not xfail for _, outcome, xfail, _ in rows)
        tr.write_line(f"criterion {crit}: {'PASS' if ok else 'FAIL'}")
        for name, outcome, xfail, notes in rows:
            status = "xfail" if xfail else outcome
            tr.write_line(f"    {name}: {status} {' '.join(notes)}".rstrip())
