from __future__ import annotations

import os

import pytest
from hypothesis import settings

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

# Acceptance results, filled by the ``criterion`` fixture and printed at the end of the run.
_CRITERIA: dict[int, tuple[bool, str, str]] = {}


class _Recorder:
    def __call__(self, number: int, name: str, ok: bool, detail: str = "") -> bool:
        ok = bool(ok)
        _CRITERIA[number] = (ok, name, detail)
        print(f"{'PASS' if ok else 'FAIL'} criterion {number}: {name} {detail}".rstrip())
        return ok


@pytest.fixture
def criterion() -> _Recorder:
    return _Recorder()


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        ok, name, detail = _CRITERIA[n]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {n}: {name} {detail}".rstrip())
