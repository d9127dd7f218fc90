import contextlib

import pytest

_LINES: list[str] = []


class _Outcome:
    def __init__(self):
        self.detail = ""


@pytest.fixture
def criterion():
    """``with criterion("4", "desk training") as c:`` records one PASS/FAIL line."""

    @contextlib.contextmanager
    def run(number, title):
        out = _Outcome()
        try:
            yield out
        except BaseException as exc:
            detail = out.detail or f"{type(exc).__name__}: {str(exc).splitlines()[0] if str(exc) else ''}"
            _LINES.append(f"FAIL  criterion {number} ({title}): {detail}")
            raise
        _LINES.append(f"PASS  criterion {number} ({title}): {out.detail}")

    return run


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in _LINES:
            terminalreporter.write_line(line)
