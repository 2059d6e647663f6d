"""Collects one pass/fail line per acceptance criterion and prints them at the end."""

from __future__ import annotations

import pytest

ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def report():
    def record(number: int, ok: bool, detail: str) -> bool:
        ACCEPTANCE[number] = (bool(ok), detail)
        return bool(ok)
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.passed or rep.skipped:
        return
    n = mark.args[0]
    ok, detail = ACCEPTANCE.get(n, (False, ""))
    if ok or not detail:
        msg = str(call.excinfo.value).splitlines()[0] if call.excinfo else rep.when
        ACCEPTANCE[n] = (False, f"{detail} error: {msg}".strip())
