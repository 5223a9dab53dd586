import re

import pytest

_ACCEPTANCE_LINES = {}


@pytest.fixture
def acceptance(request):
    """Recorder for one pass/fail line per acceptance criterion.

    The criterion number is taken from the test name (``test_criterion_NN_*``).
    A test that raises before recording is reported as a failure.
    """
    number = int(re.match(r"test_criterion_(\d+)", request.node.name).group(1))

    def record(passed, detail, elapsed, budget):
        ok = bool(passed) and elapsed < budget
        line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail} [{elapsed:.2f}s / budget {budget:g}s]"
        _ACCEPTANCE_LINES[number] = line
        print(line)
        return ok

    yield record
    if number not in _ACCEPTANCE_LINES:
        _ACCEPTANCE_LINES[number] = f"FAIL criterion {number}: raised before completing"


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for number in sorted(_ACCEPTANCE_LINES):
            terminalreporter.write_line(_ACCEPTANCE_LINES[number])
