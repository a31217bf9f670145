from collections import defaultdict

import pytest

_outcomes = defaultdict(list)
_labels = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    rep = (yield).get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    n, label = mark.args
    _labels[n] = label
    if rep.when == "call" or rep.failed or rep.skipped:
        _outcomes[n].append(rep.passed and rep.when == "call")


def pytest_terminal_summary(terminalreporter):
    if not _labels:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_labels):
        ok = bool(_outcomes[n]) and all(_outcomes[n])
        terminalreporter.write_line(f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {_labels[n]}")
