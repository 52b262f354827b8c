"""Shared pytest plumbing.

The acceptance tests register one verdict line per criterion here; the
terminal-summary hook prints them in a dedicated section at the end of
the run, where output capture cannot swallow them.
"""
from __future__ import annotations

ACCEPTANCE_VERDICTS: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_VERDICTS:
            terminalreporter.write_line(line)
