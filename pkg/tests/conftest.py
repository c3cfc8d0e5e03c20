"""Collects acceptance-criterion outcomes and prints one line per criterion."""
import pytest

_OUTCOMES: dict[str, tuple[str, str]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    cid, title = marker.args
    prev = _OUTCOMES.get(cid, ("PASS", title))[0]
    if rep.skipped:
        status = "SKIP" if prev != "FAIL" else prev
    elif rep.failed:
        status = "FAIL"
    elif rep.when == "call":
        status = prev if prev == "FAIL" else "PASS"
    else:
        return
    _OUTCOMES[cid] = (status, title)


def pytest_terminal_summary(terminalreporter):
    if not _OUTCOMES:
        return
    terminalreporter.section("acceptance criteria")
    for cid in sorted(_OUTCOMES, key=lambda c: (int(c.rstrip("abc")), c)):
        status, title = _OUTCOMES[cid]
        terminalreporter.write_line(f"{status:4}  criterion {cid}: {title}")
