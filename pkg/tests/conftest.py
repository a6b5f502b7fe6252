import pytest

# criterion number -> (title, status, detail); filled by test_acceptance
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(ACCEPTANCE):
        title, status, detail = ACCEPTANCE[num]
        terminalreporter.write_line(f"[{status}] criterion {num}: {title} | {detail}")
