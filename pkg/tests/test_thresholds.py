from __future__ import annotations

import math
import warnings

import numpy as np
import pytest

from conftest import EX1, EX23, GRID_2x2
from dividend_ratchet.errors import DomainError, ValidationError
from dividend_ratchet.model import ActionGrid, ModelParams, singleton_value, theta_roots
from dividend_ratchet.thresholds import (INF, Priority, SolverConfig, extended_value,
                                         fallback_threshold, maximize_scalar, piece_value,
                                         resolve_config, select_case, solution_from_tables,
                                         solve_backward, switch_chain)


def chain_pairs(sol):
    return [pair for pair, _ in switch_chain(sol)]


def test_example1_thresholds(ex1):
    assert ex1.z_star[0, 0] == pytest.approx(13.04, rel=1e-2)
    assert ex1.y_star[0, 1] == pytest.approx(348.5, rel=1e-2)
    assert chain_pairs(ex1) == [(0.9, 2.0), (0.9, 4.0), (0.8, 4.0)]


def test_example2_thresholds(ex2):
    assert ex2.y_star[0, 0] == 0.0
    assert ex2.z_star[1, 0] == pytest.approx(1.92, rel=1e-2)
    assert chain_pairs(ex2) == [(0.9, 2.0), (0.8, 2.0), (0.8, 4.0)]


def test_terminal_cell_is_singleton(ex1):
    xs = np.linspace(0, 30, 61)
    np.testing.assert_allclose(ex1.value(xs, 1, 1), singleton_value(EX1, 0.8, 4.0, xs), rtol=1e-14)
    assert ex1.target(1, 1) is None


def test_one_by_one_grid():
    sol = solve_backward(EX1, ActionGrid([0.9], [2.0]))
    assert sol.y_star[0, 0] == INF and sol.z_star[0, 0] == INF
    xs = np.linspace(0, 20, 41)
    np.testing.assert_allclose(sol.value(xs, 0, 0), singleton_value(EX1, 0.9, 2.0, xs), rtol=1e-14)


def test_value_continuous_across_thresholds(ex1, ex3):
    for sol in (ex1, ex3):
        m, n = sol.shape
        for i in range(m):
            for j in range(n):
                t = sol.switch_level(i, j)
                if math.isfinite(t) and t > 0:
                    left = float(sol.piece(i, j, t))
                    right = float(sol.value(t, *sol.target(i, j)))
                    assert left == pytest.approx(right, rel=1e-8, abs=1e-10)


def test_landing_cell_follows_zero_thresholds(ex2):
    assert ex2.landing_cell(0.5, 0, 0) == (1, 0)
    assert ex2.landing_cell(5.0, 0, 0) == (1, 1)


def test_extended_value_snaps(ex3):
    # retention snaps down, dividend snaps up
    v = extended_value(ex3, 3.0, 0.87, 2.5)
    assert v == float(ex3.value(3.0, 1, 1))
    with pytest.raises(DomainError):
        extended_value(ex3, 3.0, 0.95, 2.5)
    with pytest.raises(DomainError):
        ex3.value(-1.0, 0, 0)


def test_roundtrip_from_tables(ex3):
    sol = solution_from_tables(ex3.params, ex3.grid, ex3.config, ex3.y_star, ex3.z_star, ex3.k_star)
    xs = np.linspace(0, 30, 301)
    for i in range(3):
        for j in range(3):
            assert np.array_equal(sol.value(xs, i, j), ex3.value(xs, i, j))


def test_arrays_are_read_only(ex1):
    with pytest.raises(ValueError):
        ex1.y_star[0, 0] = 1.0


def test_resolved_config_defaults():
    cfg = resolve_config(EX1, GRID_2x2, SolverConfig())
    assert cfg.delta_tol == pytest.approx(1e-12 * 4.0 / 0.1)
    t2 = max(theta_roots(EX1, a, c).theta2 for a in (0.9, 0.8) for c in (2.0, 4.0))
    assert cfg.x_max == pytest.approx(1.5 * math.log(40.0 / cfg.delta_tol) / abs(t2))
    with pytest.raises(ValidationError):
        SolverConfig(x_max=-1.0)
    with pytest.raises(ValueError):
        SolverConfig(priority="whatever")


def test_piece_value_stays_finite_far_out():
    t1, t2 = 0.05, -2.0
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        # exp(t2 x) underflows while exp((t1 - t2) x) would overflow
        v = piece_value(20.0, t1, t2, 1e-3, np.array([0.0, 400.0]))
    assert v[0] == 0.0
    assert v[1] == pytest.approx(20.0 + 1e-3 * math.exp(20.0), rel=1e-14)


def test_maximize_scalar_boundary_and_interior():
    v, x = maximize_scalar(lambda x: -(x - 3.3) ** 2, 10.0, 1001, 1e-12)
    assert x == pytest.approx(3.3, abs=1e-6) and v == pytest.approx(0.0, abs=1e-12)
    v, x = maximize_scalar(lambda x: -x, 10.0, 101, 1e-12)
    assert x == 0.0 and v == 0.0


def test_fallback_semantics():
    # continuation above payoff everywhere: immediate switch
    assert fallback_threshold(lambda x: -np.ones_like(x) * (x > 0), 1e-9, 10.0, 101) == 0.0
    # gap decays through delta: switch where it stays below
    lvl = fallback_threshold(lambda x: np.exp(-x), 1e-3, 20.0, 2001)
    assert lvl == pytest.approx(-math.log(1e-3), rel=1e-9)
    # gap never falls below delta
    assert fallback_threshold(lambda x: np.ones_like(x), 1e-9, 1.0, 11, max_doublings=2) == INF


def test_select_case_table():
    assert select_case(2, 1, 0, 0.5, 1, 1) == (0.5, INF, 1)
    assert select_case(1, 2, 0, 0.5, 1, 1) == (INF, 1, 2)
    assert select_case(0, 1, 2, 0.5, 1, 0.7) == (0.7, 0.7, 3)
    assert select_case(1, 1, 0, 2.0, 2.0, 1, Priority.DIVIDEND_FIRST) == (INF, 2.0, 4)
    assert select_case(1, 1, 0, 2.0, 2.0, 1, Priority.RETENTION_FIRST) == (2.0, INF, 4)
    assert select_case(1, 0, 1, 2.0, 1, 1.5)[2] == 5
    assert select_case(0, 1, 1, 2.0, 1, 1.5)[2] == 6
    assert select_case(1, 1, 1, 2.0, 2.0, 1.0) == (1.0, 1.0, 7)
    # unavailable switches
    assert select_case(-INF, 1, -INF, 0, 3, 0) == (INF, 3, 2)


def test_priority_only_matters_on_ties(ex1):
    other = solve_backward(EX1, GRID_2x2, SolverConfig(priority="retention-first"))
    assert np.array_equal(other.y_star, ex1.y_star) and np.array_equal(other.z_star, ex1.z_star)


def test_value_nondecreasing_and_bounded(ex3):
    xs = np.linspace(0, 80, 4001)
    for i in range(3):
        for j in range(3):
            w = ex3.value(xs, i, j)
            assert w[0] == 0.0
            assert np.all(np.diff(w) >= -1e-9)
            assert np.all(w <= 40.0 + 1e-9)


def test_single_retention_column():
    p = ModelParams(6.0, 1.5, 2.0, 0.1)
    sol = solve_backward(p, ActionGrid([0.9], [1.0, 2.0, 3.0]))
    assert np.all(np.isinf(sol.y_star))
    assert chain_pairs(sol)[0] == (0.9, 1.0)


def test_example3_matches_example2_structure(ex3):
    assert ex3.y_star[0, 0] == 0.0
    assert ex3.z_star[1, 0] == pytest.approx(1.56, rel=1e-2)
    assert EX23.mu == 10.0
