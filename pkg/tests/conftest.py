import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from carma_lab import tensor as T  # noqa: E402

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(autouse=True)
def fresh_tape():
    T.new_tape()
    yield
    T.new_tape()


@pytest.fixture
def criterion():
    """Record one PASS/FAIL line for an acceptance criterion; returns ``ok``."""
    def record(number: int, ok: bool, detail: str) -> bool:
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
