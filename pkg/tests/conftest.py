"""Repeats the acceptance scorecard after the test summary.

The acceptance tests print their scorecard lines as they run, but pytest
captures per-test output, so a green run would swallow them.  This hook
replays every line collected by tests/test_acceptance.py at the end of the
session, where it survives capture.
"""
import sys


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    for name in ("test_acceptance", "tests.test_acceptance"):
        mod = sys.modules.get(name)
        if mod is not None:
            break
    else:
        return
    lines = getattr(mod, "SCORECARD", ())
    if lines:
        terminalreporter.section("acceptance scorecard")
        for line in lines:
            terminalreporter.write_line(line)
