from __future__ import annotations

import numpy as np
import pytest

from conftest import BOX, EX1
from dividend_ratchet.curves import (CurveConfig, IntervalBox, b_aux, b_aux_dx, b_aux_dxx,
                                     b_aux_mixed, b_limits_at_zero, corner_condition, eval_W_curve,
                                     find_xa, find_xc, implicit_residuals, integrate_zeta_C,
                                     quadrature_change, tabulate_curves, verify_curve_optimality)
from dividend_ratchet.errors import ConditionNotMetError, DomainError, ValidationError
from dividend_ratchet.model import ActionGrid, ModelParams, singleton_value
from dividend_ratchet.thresholds import extended_value, solve_backward


def test_box_validation():
    with pytest.raises(ValidationError):
        IntervalBox(0.0, 0.9, 2.0, 4.0)
    with pytest.raises(ValidationError):
        IntervalBox(0.9, 0.8, 2.0, 4.0)
    with pytest.raises(ValidationError):
        IntervalBox(0.8, 0.9, 4.0, 2.0)


def test_corner_condition():
    ok, bound = corner_condition(EX1, BOX)
    assert ok and bound == pytest.approx(0.1 * 2.25 * 0.64 / (2 * 2.8))
    noisy = ModelParams(6.0, 10.0, 2.0, 0.1)
    tight = IntervalBox(0.8, 0.9, 0.5, 1.0)
    assert not corner_condition(noisy, tight)[0]
    with pytest.raises(ConditionNotMetError):
        find_xc(noisy, tight)
    with pytest.raises(ConditionNotMetError):
        integrate_zeta_C(noisy, tight)


def test_limits_at_zero_match_series():
    a, c = 0.85, 3.0
    lim = b_limits_at_zero(EX1, a, c)
    np.testing.assert_allclose(b_aux(EX1, 0.0, a, c), lim, rtol=1e-10)
    np.testing.assert_allclose(b_aux(EX1, 1e-7, a, c), lim, rtol=1e-5)


@pytest.mark.parametrize("x", [1e-4, 2e-3, 0.5, 7.0, 40.0])
def test_x_derivatives_match_finite_differences(x):
    a, c = 0.82, 3.5
    h = 1e-5 * max(1.0, x)
    fd1 = (b_aux(EX1, x + h, a, c) - b_aux(EX1, x - h, a, c)) / (2 * h)
    fd2 = (b_aux_dx(EX1, x + h, a, c) - b_aux_dx(EX1, x - h, a, c)) / (2 * h)
    np.testing.assert_allclose(b_aux_dx(EX1, x, a, c), fd1, rtol=1e-5, atol=1e-9)
    np.testing.assert_allclose(b_aux_dxx(EX1, x, a, c), fd2, rtol=1e-5, atol=1e-9)


def test_mixed_partials_match_finite_differences():
    x, a, c = 3.0, 0.85, 3.0
    h = 1e-6
    fa = (b_aux_dx(EX1, x, a + h, c) - b_aux_dx(EX1, x, a - h, c)) / (2 * h)
    fc = (b_aux_dx(EX1, x, a, c + h) - b_aux_dx(EX1, x, a, c - h)) / (2 * h)
    np.testing.assert_allclose(b_aux_mixed(EX1, x, a, c, "a"), fa, rtol=1e-5)
    np.testing.assert_allclose(b_aux_mixed(EX1, x, a, c, "c"), fc, rtol=1e-5)
    with pytest.raises(ValueError):
        b_aux_mixed(EX1, x, a, c, "q")


def test_negative_reserve_rejected():
    with pytest.raises(DomainError):
        b_aux(EX1, -1.0, 0.85, 3.0)


def test_bc1_slope_negative():
    xs = np.concatenate([[0.0], np.geomspace(1e-6, 200.0, 4000)])
    for a in np.linspace(0.8, 0.9, 5):
        for c in np.linspace(2.0, 4.0, 5):
            assert np.all(b_aux_dx(EX1, xs, a, c)[3] < 0)


def test_xc_sign_pattern():
    xc = find_xc(EX1, BOX)
    assert xc == pytest.approx(24.78023500785692, rel=1e-9)
    xs = np.linspace(0.0, 4 * xc, 20001)
    d = b_aux_dx(EX1, xs, 0.8, 4.0)[2]
    assert np.all(d[xs < xc * (1 - 1e-9)] < 0)
    assert np.all(d[xs > xc * (1 + 1e-9)] > 0)


def test_xa_ratio_settles():
    xa = find_xa(EX1, BOX, eps_bc=1e-8)
    xs = np.linspace(xa * 1.001, 3 * xa, 200)
    d = b_aux_dx(EX1, xs, 0.8, 4.0)
    assert np.all(np.abs(d[0] / d[1]) < 1e-8)


def test_zeta_c_ray_properties():
    ray = integrate_zeta_C(EX1, BOX)
    assert ray.refinement_change < 1e-8
    assert ray.zeta[0] == pytest.approx(find_xc(EX1, BOX))
    assert np.all(ray.zeta > 0)
    assert quadrature_change(EX1, ray) < 1e-6


def test_solved_curves(curve1):
    assert curve1.aborted is None
    assert curve1.eps_box == BOX
    res = implicit_residuals(curve1)
    assert res["C"] < 1e-6 and res["A"] < 1e-6
    assert all(r.refinement_change < 1e-8 for r in curve1.c_rays)
    assert np.all(curve1.K >= 0)


def test_corner_is_singleton(curve1):
    xs = [0.0, 1.0, 10.0, 30.0]
    for x in xs:
        assert eval_W_curve(curve1, x, 0.8, 4.0) == float(singleton_value(EX1, 0.8, 4.0, x))


def test_value_continuous_across_regions(curve1):
    a, c = 0.85, 2.5
    z = curve1.zeta("C", a, c)
    lo = eval_W_curve(curve1, z * (1 - 1e-9), a, c)
    hi = eval_W_curve(curve1, z * (1 + 1e-9), a, c)
    assert abs(lo - hi) <= 1e-6 * 40


def test_dominates_fine_grid(curve1):
    fine = solve_backward(EX1, ActionGrid(np.linspace(0.9, 0.8, 9), np.linspace(2.0, 4.0, 9)))
    for a in (0.8, 0.84, 0.9):
        for c in (2.0, 3.1, 4.0):
            for x in (0.5, 3.0, 10.0, 25.0):
                assert eval_W_curve(curve1, x, a, c) >= float(extended_value(fine, x, a, c)) - 1e-3 * 40


def test_optimality_report_zero_weight(curve1):
    rep = verify_curve_optimality(curve1)
    assert rep.L_at_zeta_A <= 1e-4
    assert rep.Wa_min >= 0 and rep.Wc_max <= 0
    assert rep.K_corner == 0.0
    # M = 0 on the box violates the strict positivity the sufficiency theorem asks for
    assert not rep.M_positive and not rep.conditions_met


def test_outside_validity_box(curve1):
    with pytest.raises(DomainError):
        eval_W_curve(curve1, 1.0, 0.95, 3.0)


def test_positive_weight_tabulation():
    cfg = CurveConfig(n_a=3, n_c=3, M_of_a=lambda a: 1e-6 * (a - 0.8))
    cs = tabulate_curves(EX1, BOX, cfg, 0.1, 2.0)
    res = implicit_residuals(cs)
    assert res["C"] < 1e-6 and res["A"] < 1e-6
    rep = verify_curve_optimality(cs)
    assert rep.M_positive and rep.N_condition and rep.conditions_met
    interior = cs.K[1:, :-1]
    assert np.all(interior > 0)


def test_weight_must_vanish_at_anchor():
    cfg = CurveConfig(n_a=3, n_c=3, M_of_a=lambda a: 1.0)
    with pytest.raises(ValidationError):
        integrate_zeta_C(EX1, BOX, cfg, a=0.8)


def test_config_validation():
    with pytest.raises(ValidationError):
        CurveConfig(n_a=1)
    with pytest.raises(ValidationError):
        CurveConfig(eps_bc=2.0)
