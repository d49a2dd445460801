"""Shared test plumbing.

test_acceptance.py maps one test to one acceptance criterion. The hook below
collects their outcomes and reprints them as a compact PASS/FAIL block at the
end of the run, so the gate is readable at a glance even inside a long
pytest -v transcript.
"""

import pytest

_ACCEPTANCE_FILE = "test_acceptance.py"
_acceptance_results: dict[str, str] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    if _ACCEPTANCE_FILE not in str(item.fspath):
        return
    if rep.when == "call":
        _acceptance_results[item.name] = rep.outcome
    elif rep.outcome != "passed":
        # A setup error or teardown failure also counts as a failed criterion.
        _acceptance_results[item.name] = "failed"


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _acceptance_results:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for name in sorted(_acceptance_results):
        outcome = _acceptance_results[name]
        status = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"{status}  {name}")
