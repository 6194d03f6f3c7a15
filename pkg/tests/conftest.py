_criteria: dict[int, str] = {}
_outcomes: dict[int, list[bool]] = {}
_marked: dict[str, int] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by this test")


def pytest_collection_modifyitems(items):
    for item in items:
        mark = item.get_closest_marker("criterion")
        if mark is not None:
            number, title = mark.args
            _criteria[number] = title
            _marked[item.nodeid] = number


def pytest_runtest_logreport(report):
    number = _marked.get(report.nodeid)
    if number is None:
        return
    if report.when == "call" or report.failed or report.skipped:
        _outcomes.setdefault(number, []).append(report.passed and report.when == "call")


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        results = _outcomes.get(number)
        verdict = "not run" if not results else ("PASS" if all(results) else "FAIL")
        terminalreporter.write_line(f"criterion {number:2d}  {verdict:7s}  {_criteria[number]}")
