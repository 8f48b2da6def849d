from __future__ import annotations

import pytest

from dividend_ratchet.curves import IntervalBox, solve_curves
from dividend_ratchet.model import ActionGrid, ModelParams
from dividend_ratchet.thresholds import solve_backward

EX1 = ModelParams(mu=6.0, sigma=1.5, b=2.0, q=0.1)
EX23 = ModelParams(mu=10.0, sigma=1.5, b=2.0, q=0.1)
GRID_2x2 = ActionGrid([0.9, 0.8], [2.0, 4.0])
GRID_3x3 = ActionGrid([0.9, 0.85, 0.8], [2.0, 3.0, 4.0])
BOX = IntervalBox(0.8, 0.9, 2.0, 4.0)


@pytest.fixture(scope="session")
def ex1():
    return solve_backward(EX1, GRID_2x2)


@pytest.fixture(scope="session")
def ex2():
    return solve_backward(EX23, GRID_2x2)


@pytest.fixture(scope="session")
def ex3():
    return solve_backward(EX23, GRID_3x3)


@pytest.fixture(scope="session")
def goldens(ex1, ex2, ex3):
    return {"ex1": ex1, "ex2": ex2, "ex3": ex3}


@pytest.fixture(scope="session")
def curve1():
    return solve_curves(EX1, BOX)


ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def record():
    def _record(n: int, ok: bool, detail: str) -> bool:
        ACCEPTANCE[n] = (bool(ok), detail)
        print(f"criterion {n}: {'PASS' if ok else 'FAIL'} {detail}")
        return bool(ok)
    return _record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
