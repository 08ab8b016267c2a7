import pytest

_ACCEPTANCE: dict[int, dict] = {}


def _entry(number, title=""):
    return _ACCEPTANCE.setdefault(number, {"title": title, "results": [], "notes": []})


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by a test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or (report.when != "call" and not report.failed):
        return
    number, title = marker.args
    entry = _entry(number, title)
    entry["title"] = title
    entry["results"].append(report.outcome)


@pytest.fixture
def note(request):
    """Attach a measured value to the summary line of the test's acceptance criterion."""
    marker = request.node.get_closest_marker("criterion")

    def add(text: str) -> None:
        if marker is not None:
            _entry(*marker.args)["notes"].append(str(text))

    return add


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        entry = _ACCEPTANCE[number]
        results = entry["results"]
        verdict = "PASS" if results and all(r == "passed" for r in results) else "FAIL"
        terminalreporter.write_line(f"[{verdict}] criterion {number}: {entry['title']}")
        for text in entry["notes"]:
            for line in text.splitlines():
                terminalreporter.write_line(f"        {line}")
