from __future__ import annotations

import numpy as np
import pytest

from conftest import EX1, EX23
from dividend_ratchet.errors import ContractViolation, ValidationError
from dividend_ratchet.model import singleton_value
from dividend_ratchet.simulate import (SimConfig, TablePolicy, bias_bound, constant_policy,
                                       simulate_strategy, threshold_policy)

SMALL = SimConfig(n_paths=4000, seed=11)


def test_singleton_agreement():
    est = simulate_strategy(EX1, constant_policy(0.9, 2.0), 5.0, 0.9, 2.0, SimConfig(n_paths=20000, seed=3))
    target = float(singleton_value(EX1, 0.9, 2.0, 5.0))
    assert est.agrees_with(target), (est, target)
    # positive drift: ruin probability exp(-2 drift x / (sigma a)^2)
    drift = 0.9 * 6.0 - 2.0 - 2.0
    assert est.ruin_fraction == pytest.approx(np.exp(-2 * drift * 5.0 / (1.5 * 0.9) ** 2), abs=4e-4)


def test_seed_reproducible_and_sensitive():
    pol = constant_policy(0.9, 2.0)
    a = simulate_strategy(EX1, pol, 3.0, 0.9, 2.0, SMALL)
    b = simulate_strategy(EX1, pol, 3.0, 0.9, 2.0, SMALL)
    c = simulate_strategy(EX1, pol, 3.0, 0.9, 2.0, SimConfig(n_paths=4000, seed=12))
    assert a.to_dict() == b.to_dict()
    assert a.mean != c.mean


def test_zero_reserve_pays_nothing_much():
    est = simulate_strategy(EX1, constant_policy(0.9, 2.0), 0.0, 0.9, 2.0, SMALL)
    assert est.mean <= est.bias_bound + 1e-12


def test_threshold_policy_tables(ex2):
    pol = threshold_policy(ex2)
    assert pol.start_cell(0.9, 2.0) == 0
    # y* = 0 at the first cell: immediate move to (0.8, 2)
    s = pol.resolve(0, 1e-9)
    assert (pol.a[s], pol.c[s]) == (0.8, 2.0)
    na, nc = pol(np.array([0.5, 5.0]), 0.9, 2.0)
    assert list(zip(na, nc)) == [(0.8, 2.0), (0.8, 4.0)]


def test_policy_rejects_ratchet_violation():
    with pytest.raises(ContractViolation):
        TablePolicy(np.array([0.8, 0.9]), np.array([2.0, 2.0]), np.array([1.0, np.inf]), np.array([1, 1]))
    with pytest.raises(ContractViolation):
        TablePolicy(np.array([0.9, 0.9]), np.array([4.0, 2.0]), np.array([1.0, np.inf]), np.array([1, 1]))


def test_callable_strategy_ratchet_enforced():
    def cheat(x, a, c):
        return np.full_like(x, 1.0), c
    with pytest.raises(ContractViolation):
        simulate_strategy(EX1, cheat, 3.0, 0.9, 2.0, SimConfig(n_paths=10, seed=0))


def test_callable_strategy_matches_singleton():
    def hold(x, a, c):
        return a, c
    cfg = SimConfig(n_paths=3000, dt=1e-2, seed=5, horizon_eps=1e-4)
    est = simulate_strategy(EX1, hold, 4.0, 0.9, 2.0, cfg)
    target = float(singleton_value(EX1, 0.9, 2.0, 4.0))
    assert abs(est.mean - target) < 4 * est.stderr + 0.05


def test_bias_bound_components():
    pol = constant_policy(0.9, 2.0)
    cfg = SimConfig(dt=1e-3, horizon_eps=1e-8)
    assert bias_bound(EX1, pol, cfg) == pytest.approx(1e-8 * 20 + 2e-3)
    no_bridge = SimConfig(dt=1e-3, bridge=False)
    assert bias_bound(EX1, pol, no_bridge, slope0=2.0) > bias_bound(EX1, pol, cfg)


@pytest.mark.parametrize("bad", [dict(dt=0.0), dict(n_paths=0), dict(horizon_eps=1.0), dict(seed=-1),
                                 dict(max_step=1e-4)])
def test_config_validation(bad):
    with pytest.raises(ValidationError):
        SimConfig(**bad)


def test_threshold_strategy_agrees_on_example3(ex3):
    est = simulate_strategy(EX23, threshold_policy(ex3), 2.0, 0.85, 2.0, SimConfig(n_paths=20000, seed=9))
    assert est.agrees_with(float(ex3.value(2.0, 1, 0)))
