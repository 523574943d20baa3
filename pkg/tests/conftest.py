"""Shared pytest hooks.

The acceptance tests record one verdict line per criterion; printing them
from inside a test would be swallowed by output capture, so they are
replayed in the terminal summary instead.
"""

acceptance_lines = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if acceptance_lines:
        terminalreporter.section("acceptance criteria")
        for line in acceptance_lines:
            terminalreporter.write_line(line)
