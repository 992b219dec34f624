"""Shared test infrastructure.

The acceptance tests record one verdict per criterion; the summary hook
prints them as a single pass/fail line each at the end of the run, so the
criterion outcomes are visible regardless of which individual assertions
tripped.
"""

from collections import OrderedDict

_CRITERIA: "OrderedDict[int, tuple[str, bool, str]]" = OrderedDict()


def record_criterion(number: int, name: str, passed: bool, detail: str) -> None:
    _CRITERIA[number] = (name, passed, detail)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _CRITERIA:
        return
    terminalreporter.write_sep("-", "acceptance criteria")
    for number in sorted(_CRITERIA):
        name, passed, detail = _CRITERIA[number]
        verdict = "PASS" if passed else "FAIL"
        terminalreporter.write_line(
            f"criterion {number:02d} {name}: {verdict} ({detail})"
        )
