"""Numerical oracles for the structural properties of the market.

Everything here runs at toy scale: small discrete bid supports, coarse
grids. These are the checks behind the ``check`` command.
"""
import itertools
import logging
from dataclasses import dataclass, field

import numpy as np

from market import LoanModel, max_client_bid
from dp_solver import GridSpec, ValueFunction, bellman_apply, extract_client_policy, value_iterate

logger = logging.getLogger(__name__)

MASS_TOL = 1e-12


@dataclass(frozen=True)
class DiscreteBidDist:
    support: tuple
    masses: tuple

    def __post_init__(self):
        support = tuple(float(x) for x in self.support)
        masses = tuple(float(p) for p in self.masses)
        if not support or len(support) != len(masses):
            raise ValueError("A bid distribution needs matching, non-empty support and masses")
        if any(x < 0 for x in support):
            raise ValueError(f"Bids must be non-negative: {support}")
        if len(set(support)) != len(support):
            raise ValueError(f"Support values must be distinct: {support}")
        if any(p < 0 for p in masses) or abs(sum(masses) - 1.0) > 1e-9:
            raise ValueError(f"Masses must be non-negative and sum to 1: {masses}")
        order = np.argsort(support)
        object.__setattr__(self, 'support', tuple(support[i] for i in order))
        object.__setattr__(self, 'masses', tuple(masses[i] for i in order))

    @classmethod
    def from_dict(cls, mapping):
        return cls(tuple(mapping.keys()), tuple(mapping.values()))

    @classmethod
    def point(cls, x):
        return cls((x,), (1.0,))

    def mass_at(self, x):
        return sum(p for s, p in zip(self.support, self.masses) if abs(s - x) <= MASS_TOL)

    def mass_at_or_above(self, x):
        return sum(p for s, p in zip(self.support, self.masses) if s >= x - MASS_TOL)

    def mass_at_or_below(self, x):
        return sum(p for s, p in zip(self.support, self.masses) if s <= x + MASS_TOL)

    @property
    def lowest(self):
        """Smallest bid carrying positive mass"""
        return min(s for s, p in zip(self.support, self.masses) if p > 0)

    @property
    def highest(self):
        return max(s for s, p in zip(self.support, self.masses) if p > 0)

    def to_dict(self):
        return {f"{s:g}": p for s, p in zip(self.support, self.masses)}


def unified_profile(z, k):
    """Bid distributions of the unified-price market: servers ask k, clients bid 0 w.p. z"""
    if z <= 0:
        return DiscreteBidDist.point(k), DiscreteBidDist.point(k)
    if z >= 1:
        return DiscreteBidDist.point(k), DiscreteBidDist.point(0.0)
    return DiscreteBidDist.point(k), DiscreteBidDist((0.0, k), (z, 1.0 - z))


def trade_probability(server_dist, client_dist):
    """kappa = sum over pairs of 1{x_c >= x_s} p_c(x_c) p_s(x_s)"""
    return float(sum(pc * ps
                     for xc, pc in zip(client_dist.support, client_dist.masses)
                     for xs, ps in zip(server_dist.support, server_dist.masses)
                     if xc >= xs - MASS_TOL))


@dataclass(frozen=True)
class DominanceResult:
    kappa: float
    kappa_prime: float
    dominated: bool
    inconclusive: bool = False

    def to_dict(self):
        return {'kappa': self.kappa, 'kappa_prime': self.kappa_prime,
                'dominated': self.dominated, 'inconclusive': self.inconclusive}


def single_price_dominance(server_dist, client_dist, k_prime, affordable_bid=None):
    """Trade probability before and after all servers move to the single price k_prime.

    Clients who could trade with some server (bids at or above the lowest
    ask) follow the servers to k_prime. kappa_prime is therefore the client
    mass at or above the lowest ask and does not depend on k_prime, which
    is only checked against the server support. affordable_bid is the
    caller's bound on what every such client can pay; asks above it make
    the result inconclusive.
    """
    if not server_dist.support[0] - MASS_TOL <= k_prime <= server_dist.support[-1] + MASS_TOL:
        raise ValueError(f"k_prime={k_prime} lies outside the server support "
                         f"[{server_dist.support[0]}, {server_dist.support[-1]}]")
    inconclusive = affordable_bid is not None and server_dist.highest > affordable_bid + MASS_TOL
    kappa = trade_probability(server_dist, client_dist)
    kappa_prime = client_dist.mass_at_or_above(server_dist.lowest)
    if inconclusive:
        logger.warning(f"Server asks up to {server_dist.highest:g} exceed the affordable bid {affordable_bid:g}")
    return DominanceResult(kappa=kappa, kappa_prime=kappa_prime,
                           dominated=kappa_prime >= kappa - 1e-12, inconclusive=inconclusive)


def rational_distributions(support, denominator):
    """Every distribution on ``support`` whose masses are multiples of 1/denominator"""
    n = len(support)
    for cuts in itertools.combinations(range(denominator + n - 1), n - 1):
        parts, previous = [], -1
        for cut in cuts + (denominator + n - 1,):
            parts.append(cut - previous - 1)
            previous = cut
        yield DiscreteBidDist(support, tuple(p / denominator for p in parts))


def exhaustive_dominance(values=(0.0, 1.0, 2.0, 3.0), max_points=4, denominator=10):
    """Check kappa' >= kappa for all rational pairs on subsets of ``values``.

    Returns (number of cases, list of counterexamples).
    """
    cases, counterexamples = 0, []
    subsets = [s for r in range(1, max_points + 1) for s in itertools.combinations(values, r)]
    for server_support in subsets:
        servers = list(rational_distributions(server_support, denominator))
        for client_support in subsets:
            for client_dist in rational_distributions(client_support, denominator):
                for server_dist in servers:
                    result = single_price_dominance(server_dist, client_dist, server_dist.lowest)
                    cases += 1
                    if not result.dominated:
                        counterexamples.append({'server': server_dist.to_dict(), 'client': client_dist.to_dict(),
                                                **result.to_dict()})
    return cases, counterexamples


def equilibrium_facts_audit(server_dist, client_dist):
    """Bid mass that no equilibrium profile would carry"""
    violations = []
    for x, p in zip(client_dist.support, client_dist.masses):
        if p <= 0:
            continue
        if x > server_dist.highest + MASS_TOL:
            violations.append({'fact': 1, 'role': 'client', 'bid': x, 'mass': p,
                               'reason': f"client bid above the highest ask {server_dist.highest:g}"})
        if x > 0 and server_dist.mass_at(x) <= 0:
            violations.append({'fact': 3, 'role': 'client', 'bid': x, 'mass': p,
                               'reason': "positive client bid where no server asks"})
    if client_dist.highest <= 0:
        # frozen market: no ask ever trades, so every ask is a best response
        return violations
    for x, p in zip(server_dist.support, server_dist.masses):
        if p <= 0:
            continue
        if x > client_dist.highest + MASS_TOL:
            violations.append({'fact': 2, 'role': 'server', 'bid': x, 'mass': p,
                               'reason': f"server ask above the highest client bid {client_dist.highest:g}"})
        if client_dist.mass_at(x) <= 0:
            violations.append({'fact': 4, 'role': 'server', 'bid': x, 'mass': p,
                               'reason': "server ask where no client bids"})
    return violations


@dataclass
class LipschitzReport:
    max_ratio: float
    bound: float
    pairs: int
    ok: bool
    worst_pair: tuple = ()

    def to_dict(self):
        return {'max_ratio': self.max_ratio, 'bound': self.bound, 'pairs': self.pairs,
                'ok': self.ok, 'worst_pair': list(self.worst_pair)}


def lipschitz_bound(params):
    return (params.k - params.c_serve) / (1.0 - params.beta)


def lipschitz_probe(params, model, z_samples, grid=None, tol=1e-6):
    """Largest ||v_z1 - v_z2|| / |z1 - z2| over distinct sample pairs"""
    z_samples = sorted(set(float(z) for z in z_samples))
    if len(z_samples) < 2:
        raise ValueError("lipschitz_probe needs at least two distinct beliefs")
    grid = grid or GridSpec.for_params(params)
    values = {}
    warm = None
    for z in z_samples:
        warm = value_iterate(z, params, model, grid, initial=warm)
        values[z] = warm.values
    best, worst = 0.0, ()
    for z1, z2 in itertools.combinations(z_samples, 2):
        ratio = float(np.max(np.abs(values[z1] - values[z2]))) / abs(z1 - z2)
        if ratio > best:
            best, worst = ratio, (z1, z2)
    bound = lipschitz_bound(params)
    report = LipschitzReport(max_ratio=best, bound=bound, pairs=len(z_samples) * (len(z_samples) - 1) // 2,
                             ok=best <= bound + tol, worst_pair=worst)
    if not report.ok:
        logger.warning(f"Lipschitz probe: ratio {best:.6f} exceeds bound {bound:.6f} at z={worst}")
    return report


@dataclass
class PieceAudit:
    counts: dict
    interval: tuple
    stable: bool

    def to_dict(self):
        return {'counts': {f"{d:g}": c for d, c in self.counts.items()},
                'interval': list(self.interval), 'stable': self.stable}


def policy_piece_audit(params, model, z, deltas=(0.1, 0.05, 0.025), b_max=None):
    """Switch counts of the client policy inside [0, k-(s-k)/alpha] per grid step"""
    model = LoanModel.parse(model)
    counts = {}
    pin = params.k - (params.s - params.k) / params.alpha if params.k <= params.s else None
    interval = (0.0, pin)
    for delta in sorted(deltas, reverse=True):
        grid = GridSpec.for_params(params, delta=delta, b_max=b_max)
        v = value_iterate(z, params, model, grid)
        policy = extract_client_policy(v, z, params, model)
        hi = pin if pin is not None else grid.b_max
        interval = (0.0, hi)
        counts[delta] = sum(1 for p in policy.switch_points if 0.0 < p < hi)
        logger.debug(f"Policy audit delta={delta:g}: {counts[delta]} switches below {hi:.4f}")
    finest = [counts[d] for d in sorted(counts)[:2]]
    return PieceAudit(counts=counts, interval=interval, stable=len(set(finest)) == 1)


def contraction_probe(params, model, z, grid, pairs=20, seed=0):
    """Largest ||Tv1 - Tv2|| / ||v1 - v2|| over random value-function pairs"""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(pairs):
        v1 = rng.normal(scale=50.0, size=grid.n)
        v2 = v1 + rng.normal(scale=10.0, size=grid.n)
        t1 = bellman_apply(v1, z, params, model, grid=grid)
        t2 = bellman_apply(v2, z, params, model, grid=grid)
        worst = max(worst, float(np.max(np.abs(t1 - t2)) / np.max(np.abs(v1 - v2))))
    return worst


def _server_stage(values, b, lookup, params, client_dist, asks, premium):
    """Best expected server payoff per budget over the allowed asks"""
    best = np.full(len(b), -np.inf)
    choice = np.zeros(len(b))
    for ask in asks:
        rho = client_dist.mass_at_or_above(ask)
        dest = b + ask - params.c_serve + premium
        payoff = rho * (ask - params.c_serve + premium + params.beta * lookup(np.maximum(dest, 0.0))) \
            + (1.0 - rho) * params.beta * values
        payoff = np.where(dest >= -1e-12, payoff, -np.inf)
        better = payoff > best + 1e-12
        best = np.where(better, payoff, best)
        choice = np.where(better, ask, choice)
    return best, choice


def _client_stage(values, b, lookup, params, model, server_dist, bids):
    """Best expected client payoff per budget over affordable bids; ties go to the lower bid"""
    cap = np.asarray(max_client_bid(b, params, model))
    best = np.full(len(b), -np.inf)
    choice = np.zeros(len(b))
    for bid in bids:
        payoff = (1.0 - server_dist.mass_at_or_below(bid)) * (params.beta * values - params.c_lose)
        for ask, p in zip(server_dist.support, server_dist.masses):
            if p <= 0 or ask > bid + MASS_TOL:
                continue
            borrowed = np.maximum(ask - b, 0.0) if model.allows_overdraft else np.zeros(len(b))
            dest = np.maximum(b + params.s - ask - params.alpha * borrowed, 0.0)
            payoff = payoff + p * (params.s - ask + params.beta * lookup(dest))
        payoff = np.where(bid <= cap + 1e-9, payoff, -np.inf)
        better = payoff > best + 1e-12
        best = np.where(better, payoff, best)
        choice = np.where(better, bid, choice)
    return best, choice


def general_bellman_apply(v, server_dist, client_dist, params, model, grid, bid_set, premium=0.0):
    """Expanded operator: the agent picks any ask (as server) or affordable bid (as client) in bid_set.

    A trade clears at the server's ask. Returns (new values, client bids, server asks).
    """
    model = LoanModel.parse(model)
    values = v.values if isinstance(v, ValueFunction) else np.asarray(v, dtype=float)
    b = grid.points
    bids = sorted(set(float(x) for x in bid_set) | {0.0})

    def lookup(x):
        return np.interp(x, b, values)

    server, asks = _server_stage(values, b, lookup, params, client_dist, bids, premium)
    client, client_bids = _client_stage(values, b, lookup, params, model, server_dist, bids)
    return params.p_s * server + params.p_c * client, client_bids, asks


def general_value_iterate(server_dist, client_dist, params, model, grid, bid_set, tol=1e-8, max_iters=100000):
    values = np.zeros(grid.n)
    for iteration in range(1, max_iters + 1):
        new_values, client_bids, asks = general_bellman_apply(values, server_dist, client_dist, params,
                                                              model, grid, bid_set)
        residual = float(np.max(np.abs(new_values - values)))
        values = new_values
        if residual <= tol:
            return ValueFunction(grid=grid, values=values, iterations=iteration, residual=residual), client_bids, asks
    raise RuntimeError(f"General value iteration did not converge in {max_iters} sweeps (residual {residual:.3e})")


@dataclass
class CollapseReport:
    n_points: int
    violations: list = field(default_factory=list)

    @property
    def ok(self):
        return not self.violations

    def to_dict(self):
        return {'n_points': self.n_points, 'violations': self.violations[:20], 'ok': self.ok}


def collapsed_action_check(server_dist, client_dist, params, model, grid, bid_set):
    """The optimal client bid is 0 or an ask the servers actually post, never above the highest ask"""
    _, client_bids, _ = general_value_iterate(server_dist, client_dist, params, model, grid, bid_set)
    allowed = {0.0} | {x for x, p in zip(server_dist.support, server_dist.masses) if p > 0}
    report = CollapseReport(n_points=grid.n)
    for budget, bid in zip(grid.points, client_bids):
        if not any(abs(bid - a) <= MASS_TOL for a in allowed):
            report.violations.append({'budget': float(budget), 'bid': float(bid)})
    return report


def run_checks(params, model, z=0.5, grid=None, deltas=(0.2, 0.1, 0.05)):
    """Every oracle at once, as a pass/fail dictionary with counterexamples"""
    model = LoanModel.parse(model)
    grid = grid or GridSpec.for_params(params, delta=max(deltas))
    results = {}

    example = single_price_dominance(DiscreteBidDist((6.0, 7.0), (0.5, 0.5)),
                                     DiscreteBidDist((6.0, 7.0), (0.3, 0.7)), 7.0)
    cases, counterexamples = exhaustive_dominance(max_points=3, denominator=4)
    results['single_price_dominance'] = {'passed': example.dominated and not counterexamples,
                                         'example': example.to_dict(), 'cases': cases,
                                         'counterexamples': counterexamples[:10]}

    server, client = unified_profile(z, params.k)
    violations = equilibrium_facts_audit(server, client)
    results['equilibrium_facts'] = {'passed': not violations, 'violations': violations}

    lipschitz = lipschitz_probe(params, model, [0.0, 0.25, 0.5, 0.75, 1.0], grid=grid)
    # ratios above the bound are reported, not failed
    results['lipschitz'] = {'passed': bool(np.isfinite(lipschitz.max_ratio)), 'within_bound': lipschitz.ok,
                            **lipschitz.to_dict()}

    audit = policy_piece_audit(params, model, z, deltas=deltas, b_max=grid.b_max)
    results['policy_pieces'] = {'passed': audit.stable, **audit.to_dict()}

    ratio = contraction_probe(params, model, z, grid)
    results['contraction'] = {'passed': ratio <= params.beta + 1e-9, 'max_ratio': ratio, 'beta': params.beta}

    toy_grid = GridSpec.for_params(params, delta=0.5, b_max=grid.b_max)
    collapse = collapsed_action_check(server, client, params, model, toy_grid,
                                      bid_set=np.arange(0.0, params.k + 2.0, 0.5))
    results['collapsed_actions'] = {'passed': collapse.ok, **collapse.to_dict()}

    failed = [name for name, r in results.items() if not r['passed']]
    if failed:
        logger.error(f"Theory checks failed: {', '.join(failed)}")
    else:
        logger.info("All theory checks passed")
    return {'passed': not failed, 'checks': results}
