from contextlib import contextmanager

import pytest

_VERDICTS: list[tuple[str, bool, str]] = []


@contextmanager
def _criterion(name: str):
    note = {"detail": ""}
    try:
        yield note
    except BaseException as e:
        _VERDICTS.append((name, False, f"{type(e).__name__}: {str(e).splitlines()[0] if str(e) else ''}"))
        print(f"FAIL  {name}")
        raise
    else:
        _VERDICTS.append((name, True, note["detail"]))
        print(f"PASS  {name}  {note['detail']}")


@pytest.fixture
def criterion():
    """``with criterion(name) as note:`` records PASS/FAIL for an acceptance criterion."""
    return _criterion


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in _VERDICTS:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}  {detail}".rstrip())
