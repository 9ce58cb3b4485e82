import re

import pytest

_DETAILS: dict[int, str] = {}
_OUTCOMES: dict[int, str] = {}


@pytest.fixture
def acceptance():
    """``record(n, detail)`` attaches a one-line measurement to criterion ``n``."""

    def record(n: int, detail: str) -> None:
        _DETAILS[n] = detail

    return record


def pytest_runtest_logreport(report):
    m = re.search(r"test_acceptance\.py::test_criterion_(\d+)", report.nodeid)
    if not m:
        return
    n = int(m.group(1))
    if report.when == "call" or report.failed:
        if _OUTCOMES.get(n) != "FAIL":
            _OUTCOMES[n] = "PASS" if report.passed else "FAIL"


def pytest_terminal_summary(terminalreporter):
    if not _OUTCOMES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_OUTCOMES):
        detail = _DETAILS.get(n, "")
        terminalreporter.write_line(f"criterion {n:>2}: {_OUTCOMES[n]}  {detail}".rstrip())
