#!/usr/bin/env python3
"""
Trade mechanics: bids, budget updates, wealth accounting, regeneration
"""
import numpy as np
import pytest

from market import (LoanModel, MarketParams, RegenerationDistribution, AgentState, resolve_trade,
                    max_client_bid, can_afford, client_budget_update, server_budget_update,
                    settle_trade, wealth_delta, regenerate, overdraft)

PARAMS = MarketParams.cluster_defaults()


def test_resolve_trade():
    """A trade happens exactly when the bid covers the ask"""
    assert resolve_trade(7, 7) is True
    assert resolve_trade(0, 7) is False
    assert resolve_trade(3.81, 7) is False
    with pytest.raises(ValueError):
        resolve_trade(-1, 7)


def test_max_client_bid():
    """Hard caps at the budget, loans add s/(1+alpha)"""
    assert max_client_bid(0, PARAMS, 'bank') == pytest.approx(8 / 2.1)
    assert max_client_bid(5, PARAMS, 'hard') == 5
    assert max_client_bid(5, PARAMS, LoanModel.BANK) == pytest.approx(5 + 8 / 2.1)
    assert max_client_bid(5, PARAMS, 'peer-loan') == pytest.approx(5 + 8 / 2.1)
    with pytest.raises(ValueError):
        max_client_bid(-0.5, PARAMS, 'bank')


def test_client_budget_update():
    """b + s - k - alpha (k-b)^+"""
    assert client_budget_update(5, PARAMS, 'bank') == pytest.approx(3.8)
    assert client_budget_update(7, PARAMS, 'hard') == pytest.approx(8)
    boundary = PARAMS.k - PARAMS.s / (1 + PARAMS.alpha)
    assert client_budget_update(boundary, PARAMS, 'bank') == pytest.approx(0.0, abs=1e-9)
    with pytest.raises(ValueError):
        client_budget_update(5, PARAMS, 'hard')
    with pytest.raises(ValueError):
        client_budget_update(1.0, PARAMS, 'bank')


def test_client_budget_update_vectorized():
    """Arrays go through the same formula"""
    budgets = np.array([5.0, 7.0, 10.0])
    result = client_budget_update(budgets, PARAMS, 'bank')
    assert np.allclose(result, [3.8, 8.0, 11.0])


def test_server_budget_update():
    """Peer loans hand the overdraft repayment to the server"""
    assert server_budget_update(5, 5, PARAMS, 'bank') == pytest.approx(6)
    assert server_budget_update(5, 5, PARAMS, 'peer-loan') == pytest.approx(8.2)
    assert server_budget_update(5, 10, PARAMS, 'peer-loan') == pytest.approx(6)


def test_wealth_delta():
    """Bank repayments leave the system; peer repayments stay inside it"""
    bank = settle_trade(7, 5, 5, PARAMS, 'bank')
    assert bank.traded
    assert bank.overdraft == pytest.approx(2)
    assert wealth_delta(bank, 'bank') == pytest.approx(-0.2)
    hard = settle_trade(7, 9, 5, PARAMS, 'hard')
    assert hard.overdraft == 0
    assert wealth_delta(hard, 'hard') == pytest.approx(2)
    peer = settle_trade(7, 5, 5, PARAMS, 'peer-loan')
    assert wealth_delta(peer, 'peer-loan') == pytest.approx(2)


def test_failed_trade():
    """A losing client pays nothing and only suffers c_lose"""
    outcome = settle_trade(0, 5, 5, PARAMS, 'bank')
    assert not outcome.traded
    assert outcome.client_penalty_incurred
    assert outcome.client_delta == 0 and outcome.server_delta == 0
    with pytest.raises(ValueError):
        wealth_delta(outcome, 'bank')


def test_settle_trade_on_arrays():
    """A batch of matches books the same deltas as settling each one alone"""
    bids = np.array([7.0, 0.0, 7.0, 7.0])
    clients = np.array([5.0, 1.0, 9.0, 3.2])
    servers = np.array([5.0, 2.0, 0.0, 10.0])
    for model in ('bank', 'peer-loan'):
        batch = settle_trade(bids, clients, servers, PARAMS, model)
        assert list(batch.traded) == [True, False, True, True]
        assert list(batch.client_penalty_incurred) == [False, True, False, False]
        for i in range(4):
            single = settle_trade(bids[i], clients[i], servers[i], PARAMS, model)
            assert batch.client_delta[i] == pytest.approx(single.client_delta)
            assert batch.server_delta[i] == pytest.approx(single.server_delta)
            assert batch.overdraft[i] == pytest.approx(single.overdraft)
    traded = settle_trade(np.full(2, 7.0), np.array([5.0, 9.0]), np.array([5.0, 5.0]), PARAMS, 'bank')
    assert wealth_delta(traded, 'bank') == pytest.approx([-0.2, 2.0])
    with pytest.raises(ValueError):
        wealth_delta(settle_trade(bids, clients, servers, PARAMS, 'bank'), 'bank')
    with pytest.raises(ValueError, match="Bid-cap"):
        settle_trade(np.full(2, 7.0), np.array([5.0, 6.9]), np.zeros(2), PARAMS, 'hard')


def test_can_afford_and_overdraft():
    assert can_afford(3.2, PARAMS, 'bank')
    assert not can_afford(3.1, PARAMS, 'bank')
    assert not can_afford(6.9, PARAMS, 'hard')
    assert overdraft(5, 7) == 2
    assert overdraft(9, 7) == 0


def test_regenerate():
    """Fresh budgets stay inside the support"""
    rng = np.random.default_rng(1)
    for _ in range(100):
        assert 0 <= regenerate(rng, RegenerationDistribution.uniform(0, 5)) <= 5
        assert 5 <= regenerate(rng, RegenerationDistribution.parse('U[5,10]')) <= 10
    assert regenerate(rng, RegenerationDistribution.point(5)) == 5
    batch = regenerate(rng, RegenerationDistribution.uniform(5, 10), size=1000)
    assert batch.shape == (1000,)
    assert batch.min() >= 5 and batch.max() <= 10


def test_regeneration_parse():
    """Uniform, point and tabulated spellings"""
    assert RegenerationDistribution.parse('U[0,5]') == RegenerationDistribution.uniform(0, 5)
    assert RegenerationDistribution.parse('U[5,10]').label == 'U[5,10]'
    assert RegenerationDistribution.parse('5').kind == 'point'
    table = RegenerationDistribution.parse('T[1:0.25,3:0.75]')
    assert table.mean() == pytest.approx(2.5)
    assert table.upper == 3
    assert RegenerationDistribution.parse(table.to_dict()) == table
    for bad in ('U[5,0]', 'U[-1,2]', 'T[1:0.5,2:0.4]', 'normal'):
        with pytest.raises(ValueError):
            RegenerationDistribution.parse(bad)


def test_market_params_validation():
    """Invalid constants are rejected, the non-trivial band is only flagged"""
    with pytest.raises(ValueError):
        MarketParams.cluster_defaults(alpha=0.5)
    with pytest.raises(ValueError):
        MarketParams.cluster_defaults(p_c=0.5, p_s=0.6)
    with pytest.raises(ValueError):
        MarketParams.cluster_defaults(beta=1.0)
    assert PARAMS.flags() == []
    assert len(PARAMS.with_price(5).flags()) == 1
    assert PARAMS.with_roles(0.6).p_s == pytest.approx(0.4)
    assert MarketParams.from_dict(PARAMS.to_dict()) == PARAMS


def test_loan_model_parse():
    assert LoanModel.parse('peer') is LoanModel.PEER_LOAN
    assert LoanModel.parse('PEER_LOAN') is LoanModel.PEER_LOAN
    assert LoanModel.parse('hard') is LoanModel.HARD
    assert not LoanModel.HARD.allows_overdraft
    with pytest.raises(ValueError):
        LoanModel.parse('credit-card')


def test_agent_state():
    assert AgentState(3.0).alive
    with pytest.raises(ValueError):
        AgentState(-1.0)
