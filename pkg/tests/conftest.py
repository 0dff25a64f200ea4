"""Collects the acceptance-criterion outcomes and prints them after the run."""
import pytest

_RESULTS = []


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, name): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        detail = dict(rep.user_properties).get("detail", "")
        _RESULTS.append((mark.args[0], mark.args[1], rep.passed, rep.duration, detail))


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for num, name, ok, dur, detail in sorted(_RESULTS):
        line = f"criterion {num:2d} {name}: {'PASS' if ok else 'FAIL'} ({dur:.1f} s)"
        terminalreporter.write_line(line + (f"  {detail}" if detail else ""))
