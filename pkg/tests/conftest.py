import pytest

_results: dict[str, str] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion checked by the test")


@pytest.fixture
def record(request):
    """Store the one-line pass/fail verdict of an acceptance criterion."""
    marker = request.node.get_closest_marker("criterion")
    number, title = marker.args

    def _record(passed: bool, detail: str = "") -> None:
        line = f"[{'PASS' if passed else 'FAIL'}] criterion {number}: {title}"
        if detail:
            line += f" -- {detail}"
        _results[request.node.nodeid] = line
        print(line)

    return _record


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or item.nodeid in _results:
        return
    number, title = marker.args
    if rep.skipped:
        reason = rep.longrepr[2] if isinstance(rep.longrepr, tuple) else "skipped"
        _results[item.nodeid] = f"[SKIP] criterion {number}: {title} -- {reason}"
    elif rep.failed:
        _results[item.nodeid] = f"[FAIL] criterion {number}: {title} -- {call.excinfo.typename if call.excinfo else 'error'}"


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for line in sorted(_results.values(), key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
        terminalreporter.write_line(line)
