import pytest

_criteria = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by a test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    # a criterion fails if its setup or body fails
    if report.when == "call" or report.failed:
        detail = dict(item.user_properties).get("detail", "")
        prev = _criteria.get(number)
        passed = report.passed and (prev is None or prev[1])
        _criteria[number] = (title, passed, detail)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        title, passed, detail = _criteria[number]
        line = f"{'PASS' if passed else 'FAIL'}  criterion {number}: {title}"
        terminalreporter.write_line(line + (f"  [{detail}]" if detail else ""))
