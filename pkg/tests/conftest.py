"""Shared pytest wiring: the acceptance module registers one result line
per criterion; they are printed as a dedicated section at the end of the
run so the verdicts survive output capture."""

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
