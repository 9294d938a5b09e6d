"""Large-population Monte Carlo simulation of the sharing market.

Every random draw comes from a Philox stream keyed by (seed, step, phase);
within a phase the i-th draw belongs to agent i. Steps are vectorized over
the whole population with numpy, so a run is a pure function of its config.
"""
import math
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from config import Config
from market import (LoanModel, MarketParams, RegenerationDistribution, AgentState, can_afford, regenerate,
                    settle_trade, wealth_delta)
from dp_solver import GridSpec, ClientPolicy, expected_value, solve_policy
from mfe_solver import MFESolver

logger = logging.getLogger(__name__)

# draw phases within a step
PHASE_INIT, PHASE_SURVIVE, PHASE_REGEN, PHASE_ROLE, PHASE_MATCH_C, PHASE_MATCH_S, PHASE_WEATHER = range(7)

# joint weather states of the two-region market
BOTH_GOOD, BOTH_BAD, A_BAD_B_GOOD, A_GOOD_B_BAD = range(4)

QUANTILES = (5, 10, 25, 50, 75, 90, 95)


def stream(seed, step, phase):
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(step), int(phase)])))


@dataclass
class SimConfig:
    n_agents: int = Config.SIM_AGENTS
    n_steps: int = Config.SIM_STEPS
    params: MarketParams = None
    model: LoanModel = LoanModel.BANK
    seed: int = Config.SIM_SEED
    policy_refresh_period: int = Config.POLICY_REFRESH_PERIOD
    belief_window: int = Config.BELIEF_WINDOW
    belief_step: float = Config.BELIEF_STEP
    record: tuple = ('empirical_z', 'trade_ratio', 'mean_budget', 'total_wealth', 'quantiles')
    grid_delta: float = Config.GRID_DELTA
    initial_belief: float = Config.MFE_Z0
    frozen_policy: ClientPolicy = None
    # two-region mode: one (p_c, psi) profile per type plus the weather process
    profiles: tuple = None
    weather_probs: tuple = None
    weather_states: tuple = None

    def __post_init__(self):
        if self.params is None:
            self.params = MarketParams.cluster_defaults()
        self.model = LoanModel.parse(self.model)
        if self.n_agents < 2:
            raise ValueError(f"n_agents must be at least 2, got {self.n_agents}")
        if self.n_steps < 1:
            raise ValueError(f"n_steps must be positive, got {self.n_steps}")
        if self.policy_refresh_period < 1:
            raise ValueError(f"policy_refresh_period must be >= 1, got {self.policy_refresh_period}")
        if self.belief_window < 1:
            raise ValueError(f"belief_window must be >= 1, got {self.belief_window}")
        if not 0.0 < self.belief_step <= 1.0:
            raise ValueError(f"belief_step must be in (0, 1], got {self.belief_step}")
        if self.profiles is not None:
            if len(self.profiles) != 2:
                raise ValueError("Two-region simulation needs exactly two profiles")
            if self.n_agents % 2:
                raise ValueError("Two-region simulation needs an even population")
            if self.weather_probs is None and self.weather_states is None:
                raise ValueError("Two-region simulation needs weather_probs or weather_states")
            if self.weather_probs is not None and abs(sum(self.weather_probs) - 1.0) > 1e-9:
                raise ValueError("Weather state probabilities must sum to 1")

    @property
    def n_types(self):
        return 1 if self.profiles is None else 2

    def type_params(self, type_id):
        if self.profiles is None:
            return self.params
        profile = self.profiles[type_id]
        return self.params.with_roles(profile.p_c).with_psi(profile.psi)

    def to_dict(self):
        data = {
            'n_agents': self.n_agents, 'n_steps': self.n_steps, 'params': self.params.to_dict(),
            'model': self.model.value, 'seed': self.seed,
            'policy_refresh_period': self.policy_refresh_period, 'belief_window': self.belief_window,
            'belief_step': self.belief_step, 'grid_delta': self.grid_delta, 'initial_belief': self.initial_belief,
        }
        if self.profiles is not None:
            data['profiles'] = [p.to_dict() for p in self.profiles]
            data['weather_probs'] = list(self.weather_probs) if self.weather_probs is not None else None
        return data


@dataclass
class Population:
    budgets: np.ndarray
    type_ids: np.ndarray
    epoch: int = 0

    @classmethod
    def initial(cls, config):
        n = config.n_agents
        type_ids = np.zeros(n, dtype=np.int8) if config.n_types == 1 else (np.arange(n) >= n // 2).astype(np.int8)
        budgets = np.empty(n)
        rng = stream(config.seed, 0, PHASE_INIT)
        for t in range(config.n_types):
            mask = type_ids == t
            draws = regenerate(rng, config.type_params(t).psi, size=n)
            budgets[mask] = draws[mask]
        return cls(budgets=budgets, type_ids=type_ids)

    @property
    def total_wealth(self):
        return float(self.budgets.sum())

    def agent(self, i):
        return AgentState(budget=float(self.budgets[i]), type_id=int(self.type_ids[i]))

    def __len__(self):
        return len(self.budgets)


@dataclass
class EpochMetrics:
    step: int
    matches: int
    trades: int
    bid_zero: int
    mean_budget: float
    total_wealth: float
    quantiles: dict
    bank_take: float = 0.0
    premium_paid: float = 0.0
    deaths: int = 0
    wealth_before: float = 0.0
    wealth_removed: float = 0.0
    wealth_injected: float = 0.0
    trade_wealth_delta: float = 0.0
    weather_state: int = -1
    matches_by_type: tuple = (0,)
    bid_zero_by_type: tuple = (0,)
    # indexed by the server's type: trades served and loan repayments received
    trades_by_type: tuple = (0,)
    premium_by_type: tuple = (0.0,)
    beliefs: tuple = ()

    @property
    def empirical_z(self):
        return self.bid_zero / self.matches if self.matches else float('nan')

    @property
    def trade_ratio(self):
        return self.trades / self.matches if self.matches else float('nan')

    @property
    def bid_histogram(self):
        return {'0': self.bid_zero, 'k': self.matches - self.bid_zero}

    @property
    def loans_outstanding_paid(self):
        return self.bank_take

    def wealth_gap(self):
        """Deviation from the accounting identity; zero up to float rounding"""
        expected = self.wealth_before - self.wealth_removed + self.wealth_injected + self.trade_wealth_delta
        return self.total_wealth - expected

    def to_row(self):
        row = {'step': self.step, 'empirical_z': self.empirical_z, 'trade_ratio': self.trade_ratio,
               'mean_budget': self.mean_budget, 'total_wealth': self.total_wealth}
        row.update({f"q{q:02d}": self.quantiles[q] for q in QUANTILES})
        return row


def empirical_belief(window, previous=1.0, type_id=None):
    """Fraction of matched client bids equal to 0 over the window"""
    window = list(window)
    if not window:
        raise ValueError("empirical_belief needs a non-empty window")
    if type_id is None:
        matches = sum(m.matches for m in window)
        zeros = sum(m.bid_zero for m in window)
    else:
        matches = sum(m.matches_by_type[type_id] for m in window)
        zeros = sum(m.bid_zero_by_type[type_id] for m in window)
    if matches == 0:
        return previous
    return zeros / matches


def update_belief(previous, observed, step_size):
    """Move the belief a fraction step_size of the way towards the observed bid-0 share.

    With step_size=1 the belief is replaced outright, which lets bank and
    peer-loan populations flip between two policies on alternate refreshes.
    """
    if not 0.0 < step_size <= 1.0:
        raise ValueError(f"step_size must be in (0, 1], got {step_size}")
    if math.isnan(observed):
        return previous
    return (1.0 - step_size) * previous + step_size * observed


@dataclass
class SimulationResult:
    config: SimConfig
    metrics: list
    budgets: np.ndarray
    type_ids: np.ndarray
    beliefs: list = field(default_factory=list)
    policies: list = field(default_factory=list)
    premiums: list = field(default_factory=list)

    def tail(self, steps=100):
        return self.metrics[-min(steps, len(self.metrics)):]

    def terminal_trade_ratio(self, steps=100):
        window = self.tail(steps)
        matches = sum(m.matches for m in window)
        return sum(m.trades for m in window) / matches if matches else float('nan')

    def terminal_z(self, steps=100, type_id=None):
        return empirical_belief(self.tail(steps), previous=float('nan'), type_id=type_id)

    def standard_error(self, steps=100):
        """Binomial standard error of terminal_z, pooled over the tail window"""
        matches = sum(m.matches for m in self.tail(steps))
        z = self.terminal_z(steps)
        return math.sqrt(max(z * (1.0 - z), 0.0) / matches) if matches else float('nan')

    def to_frame(self):
        return pd.DataFrame([m.to_row() for m in self.metrics])

    def budget_cdf(self, points, type_id=None):
        budgets = self.budgets if type_id is None else self.budgets[self.type_ids == type_id]
        ordered = np.sort(budgets)
        return np.searchsorted(ordered, points, side='right') / len(ordered)

    def summary(self):
        data = {
            'steps': len(self.metrics),
            'terminal_trade_ratio': self.terminal_trade_ratio(),
            'terminal_z': self.terminal_z(),
            'standard_error': self.standard_error(),
            'mean_budget': float(self.budgets.mean()),
            'total_wealth': float(self.budgets.sum()),
            'final_beliefs': list(self.beliefs[-1]) if self.beliefs else [],
            'flags': self.config.params.flags(),
        }
        if self.config.n_types == 2:
            data['terminal_z_by_type'] = [self.terminal_z(type_id=t) for t in range(2)]
        return data


class MarketSimulator:
    """Best-response dynamics of a shared client policy on a simulated population"""

    def __init__(self, config):
        self.config = config
        self.params = [config.type_params(t) for t in range(config.n_types)]
        self.grids = [GridSpec.for_params(p, delta=config.grid_delta) for p in self.params]
        self._warm = [None] * config.n_types
        self.population = Population.initial(config)
        self.policies = [config.frozen_policy] * config.n_types
        self.premiums = [0.0] * config.n_types
        for flag in config.params.flags():
            logger.warning(f"Parameter band: {flag}")

    def best_response(self, type_id, z):
        value, policy = solve_policy(z, self.params[type_id], self.config.model, self.grids[type_id],
                                     premium=self.premiums[type_id], initial=self._warm[type_id])
        self._warm[type_id] = value
        return value, policy

    def refresh(self, beliefs):
        """Recompute every type's policy; a type's servers face the other type's clients"""
        for t in range(self.config.n_types):
            opponent_z = beliefs[1 - t] if self.config.n_types == 2 else beliefs[0]
            _, self.policies[t] = self.best_response(t, opponent_z)

    def _weather(self, step):
        cfg = self.config
        if cfg.weather_states is not None:
            return int(cfg.weather_states[(step - 1) % len(cfg.weather_states)])
        u = stream(cfg.seed, step, PHASE_WEATHER).random()
        return int(np.searchsorted(np.cumsum(cfg.weather_probs), u, side='right').clip(0, 3))

    def _roles(self, step):
        """Boolean client mask for this step, or None when the market is idle"""
        cfg = self.config
        pop = self.population
        if cfg.n_types == 1:
            return stream(cfg.seed, step, PHASE_ROLE).random(len(pop)) < self.params[0].p_c, -1
        state = self._weather(step)
        if state == A_BAD_B_GOOD:
            return pop.type_ids == 0, state
        if state == A_GOOD_B_BAD:
            return pop.type_ids == 1, state
        return None, state

    def step(self):
        cfg = self.config
        pop = self.population
        pop.epoch += 1
        step = pop.epoch
        budgets = pop.budgets
        n = len(pop)
        wealth_before = float(budgets.sum())

        # survival and regeneration
        dead = stream(cfg.seed, step, PHASE_SURVIVE).random(n) >= cfg.params.beta
        regen_rng = stream(cfg.seed, step, PHASE_REGEN)
        fresh = np.empty(n)
        for t in range(cfg.n_types):
            draws = regenerate(regen_rng, self.params[t].psi, size=n)
            mask = pop.type_ids == t
            fresh[mask] = draws[mask]
        wealth_removed = float(budgets[dead].sum())
        wealth_injected = float(fresh[dead].sum())
        budgets[dead] = fresh[dead]

        clients, weather_state = self._roles(step)
        matches_by_type = [0] * cfg.n_types
        zeros_by_type = [0] * cfg.n_types
        trades_by_type = [0] * cfg.n_types
        premium_by_type = [0.0] * cfg.n_types
        trades = bank_take = premium_paid = trade_delta = 0.0
        matches = bid_zero = 0
        if clients is not None:
            client_ids = np.flatnonzero(clients)
            server_ids = np.flatnonzero(~clients)
            client_ids = client_ids[stream(cfg.seed, step, PHASE_MATCH_C).permutation(len(client_ids))]
            server_ids = server_ids[stream(cfg.seed, step, PHASE_MATCH_S).permutation(len(server_ids))]
            m = min(len(client_ids), len(server_ids))
            c_idx = np.sort(client_ids[:m])
            order = np.argsort(client_ids[:m], kind='stable')
            s_idx = server_ids[:m][order]
            matches = m

            b_c = budgets[c_idx]
            b_s = budgets[s_idx]
            c_types = pop.type_ids[c_idx]
            bid_k = np.zeros(m, dtype=bool)
            for t in range(cfg.n_types):
                mask = c_types == t
                params = self.params[t]
                bid_k[mask] = self.policies[t].bids_k(b_c[mask]) & can_afford(b_c[mask], params, cfg.model)
                matches_by_type[t] = int(mask.sum())
                zeros_by_type[t] = int((mask & ~bid_k).sum())
            bid_zero = int((~bid_k).sum())

            # every server asks k, so a trade happens exactly when the client bids k
            params = cfg.params
            payer, seller = b_c[bid_k], b_s[bid_k]
            outcome = settle_trade(np.full(len(payer), params.k), payer, seller, params, cfg.model)
            repayment = params.alpha * outcome.overdraft
            if cfg.model is LoanModel.PEER_LOAN:
                premium_paid = float(repayment.sum())
            elif cfg.model is LoanModel.BANK:
                bank_take = float(repayment.sum())
            if len(payer):
                trade_delta = float(np.sum(wealth_delta(outcome, cfg.model)))
            budgets[c_idx[bid_k]] = np.maximum(payer + outcome.client_delta, 0.0)
            budgets[s_idx[bid_k]] = seller + outcome.server_delta
            s_types = pop.type_ids[s_idx[bid_k]]
            for t in range(cfg.n_types):
                served = s_types == t
                trades_by_type[t] = int(served.sum())
                if cfg.model is LoanModel.PEER_LOAN:
                    premium_by_type[t] = float(repayment[served].sum())
            trades = int(bid_k.sum())

        quantiles = np.percentile(budgets, QUANTILES) if 'quantiles' in cfg.record else [float('nan')] * len(QUANTILES)
        return EpochMetrics(
            step=step,
            matches=matches,
            trades=int(trades),
            bid_zero=bid_zero,
            mean_budget=float(budgets.mean()),
            total_wealth=float(budgets.sum()),
            quantiles={q: float(v) for q, v in zip(QUANTILES, quantiles)},
            bank_take=bank_take,
            premium_paid=premium_paid,
            deaths=int(dead.sum()),
            wealth_before=wealth_before,
            wealth_removed=wealth_removed,
            wealth_injected=wealth_injected,
            trade_wealth_delta=trade_delta,
            weather_state=weather_state,
            matches_by_type=tuple(matches_by_type),
            bid_zero_by_type=tuple(zeros_by_type),
            trades_by_type=tuple(trades_by_type),
            premium_by_type=tuple(premium_by_type),
        )

    def _estimate_premium(self, window, type_id):
        """Mean repayment a type's servers collected per trade over the window"""
        trades = sum(m.trades_by_type[type_id] for m in window)
        if trades == 0:
            return self.premiums[type_id]
        return sum(m.premium_by_type[type_id] for m in window) / trades

    def run(self):
        cfg = self.config
        logger.info(f"Simulating {cfg.n_agents} agents for {cfg.n_steps} steps "
                    f"(model={cfg.model.value}, k={cfg.params.k:g}, seed={cfg.seed})")
        beliefs = [cfg.initial_belief] * cfg.n_types
        frozen = cfg.frozen_policy is not None
        if not frozen:
            self.refresh(beliefs)
        metrics, belief_trace, policy_trace, premium_trace = [], [], [], []
        for step in range(1, cfg.n_steps + 1):
            if not frozen and step > 1 and (step - 1) % cfg.policy_refresh_period == 0:
                window = metrics[-cfg.belief_window:]
                observed = [empirical_belief(window, previous=beliefs[t], type_id=t if cfg.n_types == 2 else None)
                            for t in range(cfg.n_types)]
                beliefs = [update_belief(z, o, cfg.belief_step) for z, o in zip(beliefs, observed)]
                if cfg.model is LoanModel.PEER_LOAN:
                    self.premiums = [self._estimate_premium(window, t) for t in range(cfg.n_types)]
                self.refresh(beliefs)
                policy_trace.append((step, [p.to_dict() for p in self.policies]))
                logger.info(f"Step {step}: belief {', '.join(f'{z:.4f}' for z in beliefs)}")
            epoch = self.step()
            epoch.beliefs = tuple(beliefs)
            metrics.append(epoch)
            belief_trace.append(tuple(beliefs))
            premium_trace.append(tuple(self.premiums))
            if step % 100 == 0:
                logger.debug(f"Step {step}: trade_ratio={epoch.trade_ratio:.4f}, mean budget={epoch.mean_budget:.3f}")
        result = SimulationResult(config=cfg, metrics=metrics, budgets=self.population.budgets.copy(),
                                  type_ids=self.population.type_ids.copy(), beliefs=belief_trace,
                                  policies=policy_trace, premiums=premium_trace)
        logger.info(f"Simulation finished: terminal trade ratio {result.terminal_trade_ratio():.4f}")
        return result


def run(config):
    return MarketSimulator(config).run()


def cell_seed(master_seed, cell_index):
    return int(np.random.SeedSequence([int(master_seed), int(cell_index)]).generate_state(1)[0])


def _sweep_cell(args):
    index, k, psi, config, mode = args
    params = config.params.with_price(k).with_psi(psi)
    row = {'cell': index, 'k': float(k), 'psi': params.psi.label, 'model': config.model.value,
           'trade_ratio': float('nan'), 'expected_value': float('nan'), 'z_star': float('nan'),
           'converged': False, 'equilibria': '', 'status': 'completed', 'error': '', 'flags': '; '.join(params.flags())}
    try:
        if mode == 'solve':
            grid = GridSpec.for_params(params, delta=config.grid_delta)
            solver = MFESolver(params, config.model, grid)
            # the most liquid fixed point, so neighbouring cells stay on one branch
            equilibria = solver.sweep_equilibria(workers=1)
            report = equilibria[0] if equilibria else solver.solve()
            row.update(trade_ratio=report.trade_ratio, expected_value=report.expected_value,
                       z_star=report.z_star, converged=report.converged,
                       equilibria=' '.join(f"{r.z_star:.4f}" for r in equilibria))
        else:
            cell_config = SimConfig(
                n_agents=config.n_agents, n_steps=config.n_steps, params=params, model=config.model,
                seed=cell_seed(config.seed, index), policy_refresh_period=config.policy_refresh_period,
                belief_window=config.belief_window, belief_step=config.belief_step, grid_delta=config.grid_delta,
                initial_belief=config.initial_belief, record=('empirical_z', 'trade_ratio'))
            simulator = MarketSimulator(cell_config)
            result = simulator.run()
            z_hat = result.terminal_z()
            value, _ = simulator.best_response(0, z_hat)
            row.update(trade_ratio=result.terminal_trade_ratio(), expected_value=expected_value(value, params.psi),
                       z_star=z_hat, converged=True)
    except Exception as e:
        logger.error(f"Sweep cell {index} (k={k}, psi={params.psi.label}) failed: {str(e)}")
        row.update(status='failed', error=f"{type(e).__name__}: {e}")
    return row


def sweep(k_values, psi_options, config, mode='solve', workers=None):
    """One solve or simulation per (psi, k) cell; rows come back in cell order"""
    if mode not in ('solve', 'simulate'):
        raise ValueError(f"Sweep mode must be 'solve' or 'simulate', got {mode!r}")
    k_values = [float(k) for k in k_values]
    psi_options = [RegenerationDistribution.parse(p) for p in psi_options]
    if not k_values or not psi_options:
        raise ValueError("Sweep needs at least one k value and one regeneration distribution")
    cells = [(i, k, psi, config, mode)
             for i, (psi, k) in enumerate((psi, k) for psi in psi_options for k in k_values)]
    workers = workers or Config.WORKERS
    logger.info(f"Sweeping {len(cells)} cells ({mode}) on {workers} worker(s)")
    if workers <= 1:
        rows = [_sweep_cell(cell) for cell in cells]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_sweep_cell, cells))
    failed = sum(1 for r in rows if r['status'] == 'failed')
    if failed:
        logger.warning(f"{failed} of {len(rows)} sweep cells failed")
    return pd.DataFrame(sorted(rows, key=lambda r: r['cell']))


def parse_k_values(text):
    """'6:0.25:8.25' (inclusive range) or '6,6.5,7'"""
    text = str(text).strip()
    if ':' in text:
        parts = [float(x) for x in text.split(':')]
        if len(parts) != 3 or parts[1] <= 0:
            raise ValueError(f"k range must be start:step:stop with a positive step, got {text!r}")
        start, step, stop = parts
        count = int(math.floor((stop - start) / step + 1e-9)) + 1
        return [round(start + i * step, 10) for i in range(count)]
    return [float(x) for x in text.split(',') if x.strip()]


def parse_psi_list(text):
    """Split 'U[0,5],U[3,8]' on the commas between distributions"""
    items, depth, current = [], 0, ''
    for ch in str(text):
        if ch == '[':
            depth += 1
        elif ch == ']':
            depth -= 1
        if ch == ',' and depth == 0:
            items.append(current.strip())
            current = ''
        else:
            current += ch
    if current.strip():
        items.append(current.strip())
    return [RegenerationDistribution.parse(item) for item in items]
