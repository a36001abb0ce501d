import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from imgnav.gridworld import World, generate_world  # noqa: E402


def boxed(rows: int, cols: int, cell: float = 0.1) -> np.ndarray:
    g = np.zeros((rows, cols), bool)
    g[0, :] = g[-1, :] = g[:, 0] = g[:, -1] = True
    return g


@pytest.fixture
def open_world() -> World:
    """Empty 4 m x 4 m room."""
    return World(4.0, 4.0, 0.1, boxed(40, 40))


@pytest.fixture(scope="session")
def house() -> World:
    return generate_world(3)


# ------------------------------------------------------ acceptance summary

_VERDICTS: list[tuple[int, str, bool, str]] = []


@pytest.fixture
def verdict():
    """Record one acceptance line, then fail the test if it did not pass."""

    def record(number: int, name: str, passed: bool, detail: str) -> None:
        _VERDICTS.append((number, name, bool(passed), detail))
        print(f"criterion {number} {'PASS' if passed else 'FAIL'}: {name}: {detail}")
        assert passed, f"criterion {number} ({name}) failed: {detail}"

    return record


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for number, name, passed, detail in sorted(_VERDICTS):
        terminalreporter.write_line(f"criterion {number} {'PASS' if passed else 'FAIL'}: {name}: {detail}")
