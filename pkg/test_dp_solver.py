#!/usr/bin/env python3
"""
Dynamic program: Bellman operator, value iteration, policy extraction, server checks
"""
import os

import numpy as np
import pytest

from market import MarketParams, RegenerationDistribution
from dp_solver import (GridSpec, ValueFunction, ClientPolicy, BID_ZERO, BID_K, bellman_apply, value_iterate,
                       solve_policy, server_best_response_check,
                       server_bid_upper_bound, expected_value, client_afford_floor)
from theory_checks import contraction_probe

PARAMS = MarketParams.cluster_defaults()
SLOW = os.getenv('MARKET_SLOW_TESTS') == '1'


def small_grid(params=PARAMS, delta=0.25, b_max=40.0):
    return GridSpec.for_params(params, delta=delta, b_max=b_max)


def test_grid_spec():
    """Point count, split weights and the b_max guard"""
    grid = GridSpec(b_max=100, delta=0.05)
    assert grid.n == 2001
    lower, upper, weight = grid.split(np.array([0.125, 200.0]))
    assert (lower[0], upper[0]) == (2, 3)
    assert weight[0] == pytest.approx(0.5)
    assert lower[1] == upper[1] == grid.n - 1
    with pytest.raises(ValueError):
        GridSpec.for_params(PARAMS.with_psi('U[5,10]'), b_max=15)


def test_discretize_regeneration():
    """Cell masses sum to one and stay on the support"""
    grid = small_grid()
    mass = grid.discretize(RegenerationDistribution.uniform(0, 5))
    assert mass.sum() == pytest.approx(1.0)
    assert mass[grid.points > 5.2].sum() == 0
    atom = grid.discretize(RegenerationDistribution.point(5))
    assert atom[20] == pytest.approx(1.0)


def test_bellman_constant_input():
    """Zero input leaves only the stage rewards"""
    grid = small_grid()
    zero = np.zeros(grid.n)
    out = bellman_apply(zero, 0.0, PARAMS, 'bank', grid=grid)
    assert out[grid.points >= PARAMS.k] == pytest.approx(1.0)
    frozen = bellman_apply(zero, 1.0, PARAMS, 'bank', grid=grid)
    assert frozen[grid.points < 3.0] == pytest.approx(-0.25)


def test_bellman_rejects_non_finite():
    grid = small_grid()
    values = np.zeros(grid.n)
    values[3] = np.nan
    with pytest.raises(ValueError):
        bellman_apply(values, 0.5, PARAMS, 'bank', grid=grid)


def test_value_iterate_abundant_budget():
    """z=0 and a large budget: the geometric series 50"""
    grid = small_grid(b_max=60.0)
    v = value_iterate(0.0, PARAMS, 'bank', grid)
    assert v(20.0) == pytest.approx(50.0, rel=0.01)
    assert v.residual <= 1e-8


def test_value_iterate_frozen_hard_market():
    """z=1 under hard budgets: a poor client fails forever"""
    grid = small_grid()
    v = value_iterate(1.0, PARAMS, 'hard', grid)
    assert v(2.0) == pytest.approx(-12.5, abs=1e-5)


def test_residuals_contract():
    """Successive residuals shrink at least by beta"""
    grid = small_grid()
    v = value_iterate(0.3, PARAMS, 'bank', grid, tol=1e-6)
    residuals = np.array(v.residuals)
    assert np.all(residuals[1:] <= PARAMS.beta * residuals[:-1] + 1e-12)


def test_value_iterate_non_convergence():
    grid = small_grid()
    with pytest.raises(RuntimeError):
        value_iterate(0.3, PARAMS, 'bank', grid, tol=1e-12, max_iters=5)


def test_contraction_on_random_pairs():
    grid = small_grid()
    assert contraction_probe(PARAMS, 'bank', 0.4, grid, pairs=10) <= PARAMS.beta + 1e-9


def check_monotone(seed, count):
    rng = np.random.default_rng(seed)
    for _ in range(count):
        k = rng.uniform(6.0, 7.5)
        params = MarketParams.cluster_defaults(k=k, alpha=rng.uniform(1.0, 1.5), c_lose=rng.uniform(0.1, 0.5),
                                        psi=RegenerationDistribution.uniform(0, rng.uniform(3, 10)))
        grid = GridSpec.for_params(params, delta=0.5, b_max=40.0)
        for model in ('hard', 'bank'):
            v = value_iterate(rng.uniform(0, 1), params, model, grid, tol=1e-7)
            assert v.is_monotone(tol=1e-7)


def test_value_function_monotone_random_params():
    """v is nondecreasing in the budget across the valid band"""
    check_monotone(7, 8)


@pytest.mark.skipif(not SLOW, reason="set MARKET_SLOW_TESTS=1 for full-grid runs")
def test_value_function_monotone_hundred_params():
    check_monotone(8, 100)


def test_policy_pinned_regions():
    """bid0 below the affordability floor, bidK above the pin threshold"""
    grid = small_grid()
    v, policy = solve_policy(0.15, PARAMS, 'bank', grid)
    assert policy.action(2.0) == BID_ZERO
    assert policy.action(6.5) == BID_K
    assert policy.action(30.0) == BID_K
    assert client_afford_floor(PARAMS, 'bank') == pytest.approx(7 - 8 / 2.1)
    assert policy.pin_threshold == pytest.approx(7 - 1 / 1.1)


def test_policy_cheap_resource():
    """k below s/(1+alpha): everybody bids k"""
    params = PARAMS.with_price(3.0)
    grid = small_grid(params)
    _, policy = solve_policy(0.5, params, 'bank', grid)
    assert policy.actions == (BID_K,)
    assert policy.zero_intervals() == []


def test_policy_frozen_hard_market():
    """Hard budgets at z=1: nobody below k can bid"""
    grid = small_grid()
    _, policy = solve_policy(1.0, PARAMS, 'hard', grid)
    assert policy.action(4.99) == BID_ZERO
    assert policy.action(7.5) == BID_K


def test_bid_zero_fraction():
    """Cells split by a switch point get fractional shares"""
    grid = GridSpec(b_max=10, delta=1.0)
    policy = ClientPolicy(switch_points=(3.25,), actions=(BID_ZERO, BID_K))
    fraction = policy.bid_zero_fraction(grid)
    assert fraction[2] == 1.0
    assert fraction[3] == pytest.approx(0.75)
    assert fraction[4] == 0.0
    assert policy.bids_k(np.array([3.0, 3.25, 5.0])).tolist() == [False, True, True]


def test_server_best_response():
    """Asking k beats asking 0; at z=1 the two tie"""
    grid = small_grid()
    v = value_iterate(0.15, PARAMS, 'bank', grid)
    assert server_best_response_check(v, 0.15, PARAMS).ok
    flat = ValueFunction(grid=grid, values=np.full(grid.n, 3.0))
    assert server_best_response_check(flat, 0.3, PARAMS).ok
    frozen = server_best_response_check(v, 1.0, PARAMS)
    assert frozen.ok
    assert len(frozen.ties) == grid.n


def test_server_bid_upper_bound():
    """Largest root of c_serve = x beta^(x - s/(1+alpha) - b_init_max)"""
    report = server_bid_upper_bound(PARAMS)
    assert report.x_bar == pytest.approx(176.0, abs=0.1)
    assert report.peak_x == pytest.approx(-1 / np.log(0.98), rel=1e-3)
    wider = server_bid_upper_bound(PARAMS.with_psi('U[5,10]'))
    shift = PARAMS.s / (1 + PARAMS.alpha) + 10
    assert wider.x_bar * PARAMS.beta ** (wider.x_bar - shift) == pytest.approx(PARAMS.c_serve, abs=1e-6)
    assert wider.x_bar > report.x_bar
    with pytest.raises(ValueError):
        server_bid_upper_bound(MarketParams.cluster_defaults(c_serve=30.0))


def test_expected_value_constant():
    grid = small_grid()
    v = ValueFunction(grid=grid, values=np.full(grid.n, 4.2))
    assert expected_value(v, RegenerationDistribution.uniform(0, 5)) == pytest.approx(4.2)
