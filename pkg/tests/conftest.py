"""Shared pytest hooks: a one-line PASS/FAIL report per acceptance test."""
from collections import OrderedDict

_acceptance = OrderedDict()


def pytest_runtest_logreport(report):
    if "test_acceptance.py" not in report.nodeid:
        return
    name = report.nodeid.split("::")[-1]
    if report.when == "call":
        _acceptance[name] = (report.outcome, report.duration)
    elif report.when == "setup" and report.outcome != "passed":
        _acceptance[name] = (report.outcome, report.duration)


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.write_sep("-", "acceptance criteria")
    for name, (outcome, duration) in sorted(_acceptance.items()):
        status = {"passed": "PASS", "failed": "FAIL"}.get(outcome,
                                                          outcome.upper())
        label = name.replace("test_criterion_", "criterion ")
        terminalreporter.write_line(f"{status} {label} ({duration:.1f}s)")
