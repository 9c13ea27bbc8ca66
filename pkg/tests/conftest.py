"""Collects the acceptance verdicts and prints them after the run."""

VERDICTS: list[tuple[int, bool, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for n, ok, detail in sorted(VERDICTS):
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
