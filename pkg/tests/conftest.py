import pytest

ACCEPTANCE_RESULTS = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in ACCEPTANCE_RESULTS:
        terminalreporter.write_line(line)


@pytest.fixture
def criterion(request):
    """Record one PASS/FAIL line for an acceptance criterion.

    Usage: ``criterion("AC1", "detail")`` at the end of the test; the line is
    written as FAIL if the test body raised before or after that call.
    """
    record = {}

    def set_line(label, detail=""):
        record["label"] = label
        record["detail"] = detail

    yield set_line
    label = record.get("label", request.node.name)
    rep = getattr(request.node, "rep_call", None)
    ok = rep is not None and rep.passed
    line = f"{label}: {'PASS' if ok else 'FAIL'} {record.get('detail', '')}".rstrip()
    ACCEPTANCE_RESULTS.append(line)
    print(line)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    if rep.when == "call":
        item.rep_call = rep
