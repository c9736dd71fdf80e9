"""Collects one verdict per acceptance criterion and prints them at the end of the run."""
import pytest

VERDICTS: dict[int, tuple[bool, str]] = {}
_DETAILS: dict[str, str] = {}


@pytest.fixture
def note(request):
    """Attach a one-line measurement summary to the current criterion."""
    def _note(text: str) -> None:
        _DETAILS[request.node.nodeid] = text
    return _note


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when not in ("setup", "call"):
        return
    if rep.when == "setup" and rep.passed:
        return
    n = mark.args[0]
    detail = _DETAILS.get(item.nodeid, "")
    if rep.failed and not detail:
        detail = str(call.excinfo.value).splitlines()[0] if call.excinfo else "error"
    VERDICTS[n] = (rep.passed, detail)


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(VERDICTS):
        ok, detail = VERDICTS[n]
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
