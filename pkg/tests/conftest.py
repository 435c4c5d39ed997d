"""Shared pytest plumbing: the acceptance-criterion report.

Acceptance tests record one line per criterion; the summary hook prints
them at the end of the session regardless of output capturing.
"""

_CRITERION_LINES = {}


def record_criterion(number, name, passed, detail=""):
    status = "PASS" if passed else "FAIL"
    suffix = f" ({detail})" if detail else ""
    _CRITERION_LINES[number] = f"ACCEPTANCE {number:2d} {name}: {status}{suffix}"


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _CRITERION_LINES:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number in sorted(_CRITERION_LINES):
        terminalreporter.write_line(_CRITERION_LINES[number])
