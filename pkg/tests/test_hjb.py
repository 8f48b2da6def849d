from __future__ import annotations

import numpy as np
import pytest

from conftest import EX1
from dividend_ratchet.hjb import (all_levels, boundary_checks, chain_levels, default_samples,
                                  hjb_residuals, operator_L, smooth_pasting, viscosity_scan)
from dividend_ratchet.model import ActionGrid
from dividend_ratchet.thresholds import solution_from_tables, solve_backward


def test_generator_vanishes_in_continuation(ex1):
    xs = np.linspace(0.01, 13.0, 200)
    assert np.max(np.abs(operator_L(ex1, 0, 0, xs))) < 1e-10
    xs = np.linspace(0.01, 300.0, 200)
    assert np.max(np.abs(operator_L(ex1, 1, 1, xs))) < 1e-10


def test_example1_certified(ex1):
    scan = viscosity_scan(ex1)
    assert scan.passed, scan
    assert scan.tol_pos == pytest.approx(1e-6 * 40.0)
    pasting = smooth_pasting(ex1)
    assert pasting and max(pc.relative for pc in pasting) <= 1e-3
    assert boundary_checks(ex1).passed


def test_samples_cluster_at_thresholds(ex1):
    xs = default_samples(ex1, 2000)
    assert xs.size >= 1500 and xs[0] == 0.0
    t = ex1.z_star[0, 0]
    assert np.min(np.abs(xs - t)) < 1e-4


def test_levels_helpers(ex1, ex2):
    assert chain_levels(ex1, 0, 0) == [ex1.z_star[0, 0], ex1.y_star[0, 1]]
    assert chain_levels(ex1, 1, 1) == []
    assert 0.0 not in all_levels(ex2)


def test_residual_rows_shape(ex1):
    rep = hjb_residuals(ex1, np.linspace(0, 20, 21))
    rows = list(rep.rows())
    assert rows and all(len(r) == 7 for r in rows)
    assert all(r[-1] == max(r[3:6]) for r in rows)


def test_scan_detects_perturbed_solution(ex1):
    # a wrong constant breaks the equation and the pasting
    k = np.array(ex1.k_star)
    k[0, 0] *= 1.05
    bad = solution_from_tables(ex1.params, ex1.grid, ex1.config, ex1.y_star, ex1.z_star, k)
    assert not viscosity_scan(bad).passed or max(pc.relative for pc in smooth_pasting(bad)) > 1e-3


def test_scan_detects_missing_switch(ex1):
    # never switching leaves the obstacle above the value
    y = np.full((2, 2), np.inf)
    z = np.full((2, 2), np.inf)
    k = np.zeros((2, 2))
    bad = solution_from_tables(ex1.params, ex1.grid, ex1.config, y, z, k)
    assert not viscosity_scan(bad).passed


def test_boundary_values_singleton():
    sol = solve_backward(EX1, ActionGrid([0.85], [3.0]))
    rep = boundary_checks(sol)
    assert rep.passed and rep.zero_ok
