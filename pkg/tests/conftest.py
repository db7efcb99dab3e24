"""Collects acceptance outcomes and prints them as a block at the end of the run."""

import pytest

ACCEPTANCE: dict[str, tuple[str, bool, str]] = {}


@pytest.fixture
def criterion():
    def record(key: str, title: str, ok: bool, detail: str) -> bool:
        ACCEPTANCE[key] = (title, bool(ok), detail)
        print(f"{key} {'PASS' if ok else 'FAIL'} {title}: {detail}")
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: int(k[1:])):
        title, ok, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"{key:>4} {'PASS' if ok else 'FAIL'}  {title}: {detail}")
