import sys


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """Echo the per-gate [PASS]/[FAIL] lines after the test summary.

    Plain `pytest` captures stdout, which would hide the lines printed by
    tests/test_acceptance.py on success; this repeats them where they are
    always visible.
    """
    module = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    lines = getattr(module, "GATE_LINES", None)
    if not lines:
        return
    terminalreporter.section("acceptance gates")
    for line in lines:
        terminalreporter.write_line(line)
