from __future__ import annotations

from collections import OrderedDict

import numpy as np
import pytest

from phalanx.data import from_arrays

_criteria: "OrderedDict[int, dict]" = OrderedDict()


def pytest_runtest_logreport(report):
    crit = getattr(report, "_criterion", None)
    if crit is None:
        return
    number, title = crit
    entry = _criteria.setdefault(number, {"title": title, "outcomes": []})
    if report.when == "call" or report.outcome != "passed":
        entry["outcomes"].append(report.outcome)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is not None:
        report._criterion = tuple(marker.args)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        entry = _criteria[number]
        outs = entry["outcomes"]
        if any(o == "failed" for o in outs):
            status = "FAIL"
        elif outs and all(o == "skipped" for o in outs):
            status = "SKIP"
        elif outs:
            status = "PASS"
        else:
            status = "NOT RUN"
        terminalreporter.write_line(f"{status:<8} criterion {number:>2}: {entry['title']}")


@pytest.fixture
def tiny_dataset():
    x = np.array([[0.1, 1.0], [0.4, 0.5], [0.2, 0.1], [0.9, 0.3], [0.3, 0.2], [0.8, 0.9]])
    return from_arrays(x, [1, 0, 0, 1, 0, 1], ["A", "A", "A", "B", "B", "B"], ["a1", "a2", "a3", "b1", "b2", "b3"])
