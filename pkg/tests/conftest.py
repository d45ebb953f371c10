import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

_CRITERIA: dict[int, tuple[str, str, str]] = {}


@pytest.fixture
def criterion(request):
    """Register an acceptance criterion; the outcome is filled in by the report hook."""

    def register(number: int, title: str):
        request.node.criterion = (number, title)
        _CRITERIA[number] = ("FAIL", title, "")

    return register


@pytest.fixture
def detail(request):
    def note(text: str):
        request.node.criterion_detail = text

    return note


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    if not hasattr(item, "criterion"):
        return
    number, title = item.criterion
    note = getattr(item, "criterion_detail", "")
    if rep.when == "call" or (rep.when == "setup" and rep.failed):
        status = "PASS" if rep.passed else "FAIL"
        if rep.failed and not note:
            note = str(rep.longrepr.reprcrash.message if hasattr(rep.longrepr, "reprcrash") else rep.longrepr)[:200]
        _CRITERIA[number] = (status, title, note)
        line = f"criterion {number} {status}: {title}" + (f" ({note})" if note else "")
        print("\n" + line, file=sys.stderr)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        status, title, note = _CRITERIA[number]
        terminalreporter.write_line(f"[{status}] {number}. {title}" + (f" - {note}" if note else ""))
