import contextlib
import time

import pytest

# (number, title, status, detail) rows filled in by the acceptance suite
ACCEPTANCE_RESULTS: list[tuple[int, str, str, str]] = []


class Criterion:
    def __init__(self, number: int, title: str):
        self.number = number
        self.title = title
        self.details: list[str] = []

    def note(self, text: str) -> None:
        self.details.append(text)


@contextlib.contextmanager
def _record(number: int, title: str):
    c = Criterion(number, title)
    start = time.perf_counter()
    status = "FAIL"
    try:
        yield c
        status = "PASS"
    except pytest.skip.Exception:
        status = "SKIP"
        raise
    finally:
        c.note(f"{time.perf_counter() - start:.1f}s")
        ACCEPTANCE_RESULTS.append((number, title, status, "; ".join(c.details)))
        print(f"criterion {number} {status}: {title} ({'; '.join(c.details)})")


@pytest.fixture
def criterion():
    return _record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, status, detail in sorted(ACCEPTANCE_RESULTS):
        terminalreporter.write_line(f"[{status}] {number}. {title}: {detail}")
