from __future__ import annotations

from pathlib import Path

from .acceptance_log import REPORT_PATH, results


def pytest_terminal_summary(terminalreporter):
    rows = results()
    if not rows:
        return
    terminalreporter.section("acceptance criteria")
    for line in rows:
        terminalreporter.write_line(line)
    details = Path(REPORT_PATH)
    if details.exists():
        terminalreporter.write_line(f"tables: {details}")
