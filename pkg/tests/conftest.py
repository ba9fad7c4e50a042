"""Collects one pass/fail line per acceptance criterion and prints them at the end."""

import pytest

_criteria = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion number n")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or rep.when not in ("setup", "call"):
        return
    n, title = marker.args
    if rep.when == "setup" and rep.passed:
        return
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    status = "PASS" if rep.passed else ("SKIP" if rep.skipped else "FAIL")
    _criteria[n] = (status, title, rep.duration, detail)
    line = f"criterion {n:2d} {status}  {title} ({rep.duration:.1f}s)" + (f"  [{detail}]" if detail else "")
    item.config._acceptance_lines = getattr(item.config, "_acceptance_lines", [])
    item.config._acceptance_lines.append((n, line))


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "_acceptance_lines", [])
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(lines):
        terminalreporter.write_line(line)
