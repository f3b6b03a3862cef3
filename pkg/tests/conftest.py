import pytest

_RESULTS = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when not in ("setup", "call"):
        return
    if report.when == "setup" and report.passed:
        return
    detail = dict(item.user_properties).get("detail", "")
    status = "PASS" if report.passed else ("SKIP" if report.skipped else "FAIL")
    _RESULTS[(marker.args[0], item.name)] = (status, detail)


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for (n, name), (status, detail) in sorted(_RESULTS.items()):
        line = f"criterion {n} [{name}]: {status}"
        terminalreporter.write_line(f"{line}  {detail}" if detail else line)
