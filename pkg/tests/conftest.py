import re

import pytest

_results = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    match = re.match(r"test_criterion_(\d+)_", item.name)
    if not match or report.when != "call" and not (report.when == "setup" and report.failed):
        return
    detail = dict(item.user_properties).get("detail", "")
    doc = (item.function.__doc__ or item.name).strip().splitlines()[0]
    _results[int(match.group(1))] = (report.outcome, doc, detail)


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_results):
        outcome, doc, detail = _results[number]
        status = "PASS" if outcome == "passed" else "FAIL"
        line = f"criterion {number:2d}: {status}  {doc}"
        terminalreporter.write_line(line + (f"  [{detail}]" if detail else ""))
