from __future__ import annotations

import math

import numpy as np
import pytest

from dividend_ratchet.errors import DegenerateDiffusionError, DomainError, ValidationError
from dividend_ratchet.model import (ActionGrid, CLPrimitives, ModelParams, params_from_cl,
                                    singleton_value, singleton_value_deterministic,
                                    theta_partials, theta_roots, theta_second_partials)

P = ModelParams(6.0, 1.5, 2.0, 0.1)


def test_theta_reference_values():
    t1, t2 = theta_roots(P, 0.9, 2.0)
    assert t1 == pytest.approx(0.068385, abs=1e-6)
    assert t2 == pytest.approx(-1.604735, abs=1e-6)


def test_symmetric_roots():
    a = 0.8
    c = P.mu * a - P.b
    t1, t2 = theta_roots(P, a, c)
    assert t1 == pytest.approx(-t2, rel=1e-14)
    assert t1 == pytest.approx(math.sqrt(2 * P.q) / (P.sigma * a), rel=1e-14)


def test_vieta_extreme_drift():
    # large |mu a - b - c| is where the naive formula cancels
    p = ModelParams(1e4, 1e-3, 0.0, 1e-3)
    t1, t2 = theta_roots(p, 1.0, 0.0)
    s2 = p.sigma**2
    assert t1 * t2 == pytest.approx(-2 * p.q / s2, rel=1e-12)
    assert t1 + t2 == pytest.approx(-2 * (p.mu - p.b) / s2, rel=1e-12)


def test_partials_match_finite_differences():
    d = theta_partials(P, 0.9, 2.0)
    h = 1e-6
    fd_a = (np.array(theta_roots(P, 0.9 + h, 2.0)) - np.array(theta_roots(P, 0.9 - h, 2.0))) / (2 * h)
    fd_c = (np.array(theta_roots(P, 0.9, 2.0 + h)) - np.array(theta_roots(P, 0.9, 2.0 - h))) / (2 * h)
    np.testing.assert_allclose([d.d1_da, d.d2_da], fd_a, rtol=1e-5)
    np.testing.assert_allclose([d.d1_dc, d.d2_dc], fd_c, rtol=1e-5)
    assert d.d1_dc > 0 and d.d2_dc > 0 and d.d1_da < 0


def test_second_partials_match_finite_differences():
    s = theta_second_partials(P, 0.85, 3.0)
    h = 1e-4
    fa = lambda a: np.array(theta_partials(P, a, 3.0))[[0, 1]]
    fc = lambda c: np.array(theta_partials(P, 0.85, c))[[2, 3]]
    np.testing.assert_allclose([s.d1_daa, s.d2_daa], (fa(0.85 + h) - fa(0.85 - h)) / (2 * h), rtol=1e-6)
    np.testing.assert_allclose([s.d1_dcc, s.d2_dcc], (fc(3.0 + h) - fc(3.0 - h)) / (2 * h), rtol=1e-6)


def test_zero_retention_is_degenerate():
    with pytest.raises(DegenerateDiffusionError):
        theta_roots(P, 0.0, 2.0)
    with pytest.raises(DegenerateDiffusionError):
        theta_partials(P, 0.0, 2.0)


def test_singleton_value_shape():
    xs = np.linspace(0, 40, 401)
    v = singleton_value(P, 0.9, 2.0, xs)
    assert v[0] == 0.0
    assert np.all(np.diff(v) >= 0)
    assert np.all(np.diff(v, 2) <= 1e-9 * 20)
    assert singleton_value(P, 0.9, 2.0, 1e4) == pytest.approx(20.0)
    t2 = theta_roots(P, 0.9, 2.0).theta2
    assert singleton_value(P, 0.9, 2.0, 10.0) == pytest.approx(20 * (1 - math.exp(10 * t2)), rel=1e-14)


def test_singleton_negative_reserve():
    with pytest.raises(DomainError):
        singleton_value(P, 0.9, 2.0, -1.0)


def test_deterministic_singleton():
    # full reinsurance: ruin at x / (b + c)
    x = 3.0
    v = singleton_value_deterministic(P, 1.0, x)
    assert v == pytest.approx(10 * (1 - math.exp(-0.1 * x / 3.0)))
    assert singleton_value(P, 0.0, 1.0, x) == v
    rich = ModelParams(6.0, 1.5, -3.0, 0.1)
    assert singleton_value_deterministic(rich, 1.0, 5.0) == pytest.approx(10.0)


@pytest.mark.parametrize("bad", [dict(sigma=0.0), dict(q=0.0), dict(mu=math.nan)])
def test_params_validation(bad):
    kw = dict(mu=6.0, sigma=1.5, b=2.0, q=0.1) | bad
    with pytest.raises(ValidationError):
        ModelParams(**kw)


def test_grid_validation_and_indices():
    with pytest.raises(ValidationError):
        ActionGrid([0.8, 0.9], [2, 4])
    with pytest.raises(ValidationError):
        ActionGrid([0.9, 0.8], [4, 2])
    with pytest.raises(ValidationError):
        ActionGrid([], [1])
    g = ActionGrid([0.9, 0.85, 0.8], [2, 3, 4])
    assert g.retention_index(0.87) == 1
    assert g.dividend_index(2.5) == 1
    with pytest.raises(DomainError):
        g.retention_index(0.95)


def test_cramer_lundberg_mapping():
    prim = CLPrimitives(lam=2.0, mu0=1.5, sigma0_sq=3.0, theta=0.3, gamma=0.4)
    p = params_from_cl(prim, 0.05)
    assert p.sigma == pytest.approx(math.sqrt(6.0))
    assert p.mu == pytest.approx(0.3 * 3.0)
    assert p.b == pytest.approx(-0.1 * 3.0)
    with pytest.raises(ValidationError):
        CLPrimitives(lam=2.0, mu0=1.5, sigma0_sq=3.0, theta=0.3, gamma=0.4, principle="bogus")


def test_sign_claims_random_sweep():
    rng = np.random.default_rng(3)
    for _ in range(20000):
        p = ModelParams(rng.uniform(0.5, 15), rng.uniform(0.1, 5), rng.uniform(-2, 5), rng.uniform(0.01, 0.5))
        a = rng.uniform(0.05, 1)
        d = p.mu * a - p.b
        if d <= 0:
            continue
        bound = p.q * p.sigma**2 * a * a / (2 * d)
        c = rng.uniform(0, bound)
        if c <= 0:
            continue
        assert c / p.q * theta_roots(p, a, c).theta2 + 1 >= -1e-12
        disc = d * d - 4 * p.q * p.sigma**2 * a * a
        if disc >= 0:
            assert c < (d - np.sqrt(disc)) / 2
