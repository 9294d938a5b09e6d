"""Single-agent discounted dynamic program under the unified-price belief.

Servers are believed to ask k; a matched client is believed to bid 0 with
probability z and k otherwise. The value function lives on a uniform budget
grid; off-grid lookups interpolate linearly and lookups above b_max clamp to
v(b_max).
"""
import math
import logging
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy.optimize import bisect, minimize_scalar

from config import Config
from market import LoanModel, can_afford

logger = logging.getLogger(__name__)

BID_ZERO = 'bid0'
BID_K = 'bidK'


@dataclass(frozen=True)
class GridSpec:
    b_max: float
    delta: float

    def __post_init__(self):
        if self.delta <= 0:
            raise ValueError(f"Grid step must be positive, got {self.delta}")
        if self.b_max <= self.delta:
            raise ValueError(f"b_max={self.b_max} must exceed the grid step {self.delta}")

    @classmethod
    def for_params(cls, params, delta=None, b_max=None):
        grid = cls(b_max=float(b_max if b_max is not None else Config.GRID_B_MAX),
                   delta=float(delta if delta is not None else Config.GRID_DELTA))
        if grid.b_max < params.psi.upper + params.s:
            raise ValueError(f"b_max={grid.b_max} must cover the regeneration support plus s "
                             f"({params.psi.upper + params.s})")
        return grid

    @property
    def n(self):
        return int(math.floor(self.b_max / self.delta + 1e-9)) + 1

    @property
    def points(self):
        return np.arange(self.n) * self.delta

    def cell_bounds(self):
        """Lower/upper edges of the cell represented by each grid point"""
        pts = self.points
        lo = np.maximum(pts - 0.5 * self.delta, 0.0)
        hi = pts + 0.5 * self.delta
        return lo, hi

    def split(self, x):
        """Linear split of budgets x onto the two neighbouring grid points.

        Returns (lower index, upper index, weight of the upper index). Budgets
        above b_max clamp to the last grid point.
        """
        pos = np.clip(np.asarray(x, dtype=float) / self.delta, 0.0, self.n - 1)
        lower = np.floor(pos).astype(int)
        upper = np.minimum(lower + 1, self.n - 1)
        weight = pos - lower
        return lower, upper, weight

    def discretize(self, psi):
        """Probability mass of the regeneration distribution per grid cell"""
        if psi.upper > self.b_max:
            raise ValueError(f"Regeneration support {psi.label} exceeds b_max={self.b_max}")
        mass = np.zeros(self.n)
        if psi.kind == 'uniform':
            lo, hi = self.cell_bounds()
            overlap = np.clip(np.minimum(hi, psi.hi) - np.maximum(lo, psi.lo), 0.0, None)
            mass = overlap / (psi.hi - psi.lo)
        else:
            atoms = psi.values if psi.kind == 'tabulated' else (psi.lo,)
            probs = psi.probs if psi.kind == 'tabulated' else (1.0,)
            lower, upper, weight = self.split(atoms)
            np.add.at(mass, lower, np.asarray(probs) * (1.0 - weight))
            np.add.at(mass, upper, np.asarray(probs) * weight)
        return mass / mass.sum()

    def refine(self):
        return GridSpec(b_max=self.b_max, delta=self.delta / 2.0)

    def to_dict(self):
        return {'b_max': self.b_max, 'delta': self.delta, 'n': self.n}


@dataclass(frozen=True)
class Belief:
    z: float

    def __post_init__(self):
        if not 0.0 <= self.z <= 1.0:
            raise ValueError(f"Belief z must lie in [0,1], got {self.z}")


def _z(z):
    belief = z if isinstance(z, Belief) else Belief(float(z))
    return belief.z


@dataclass(frozen=True, eq=False)
class ValueFunction:
    grid: GridSpec
    values: np.ndarray
    iterations: int = 0
    residual: float = float('nan')
    residuals: tuple = ()

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        if values.shape != (self.grid.n,):
            raise ValueError(f"Value array has shape {values.shape}, grid needs ({self.grid.n},)")
        values.setflags(write=False)
        object.__setattr__(self, 'values', values)

    def __call__(self, b):
        return np.interp(b, self.grid.points, self.values)

    @property
    def sup_norm(self):
        return float(np.max(np.abs(self.values)))

    def is_monotone(self, tol=1e-9):
        return bool(np.all(np.diff(self.values) >= -tol))

    def to_frame(self):
        return pd.DataFrame({'budget': self.grid.points, 'value': self.values})


@dataclass(frozen=True)
class ClientPolicy:
    """Piecewise-constant {bid0, bidK} best response.

    actions[i] applies on [switch_points[i-1], switch_points[i]); the last
    action extends to infinity.
    """
    switch_points: tuple
    actions: tuple
    tie_points: tuple = ()
    p_tie: float = None
    afford_floor: float = 0.0
    pin_threshold: float = float('inf')

    def __post_init__(self):
        if len(self.actions) != len(self.switch_points) + 1:
            raise ValueError("A policy needs exactly one more action than switch points")
        if any(a not in (BID_ZERO, BID_K) for a in self.actions):
            raise ValueError(f"Unknown policy action in {self.actions}")
        if list(self.switch_points) != sorted(self.switch_points):
            raise ValueError("Switch points must be ordered")

    @classmethod
    def constant(cls, action):
        return cls(switch_points=(), actions=(action,))

    def action(self, b):
        return self.actions[int(np.searchsorted(self.switch_points, b, side='right'))]

    def bids_k(self, budgets):
        """Vectorized: True where the policy bids k"""
        idx = np.searchsorted(np.asarray(self.switch_points, dtype=float), budgets, side='right')
        return np.asarray([a == BID_K for a in self.actions])[idx]

    def zero_intervals(self):
        edges = [0.0] + list(self.switch_points) + [math.inf]
        return [(edges[i], edges[i + 1]) for i, a in enumerate(self.actions) if a == BID_ZERO]

    def bid_zero_fraction(self, grid):
        """Share of each grid cell lying in the bid-0 region"""
        lo, hi = grid.cell_bounds()
        covered = np.zeros(grid.n)
        for start, end in self.zero_intervals():
            covered += np.clip(np.minimum(hi, end) - np.maximum(lo, start), 0.0, None)
        fraction = np.clip(covered / (hi - lo), 0.0, 1.0)
        if self.p_tie is not None and self.tie_points:
            lower, upper, weight = grid.split(self.tie_points)
            nearest = np.where(weight < 0.5, lower, upper)
            fraction[nearest] = self.p_tie
        return fraction

    def switches_in(self, lo, hi):
        return sum(1 for p in self.switch_points if lo <= p <= hi)

    def to_dict(self):
        return {
            'switch_points': list(self.switch_points),
            'actions': list(self.actions),
            'tie_points': list(self.tie_points),
            'p_tie': self.p_tie,
        }


def _destinations(grid, params, model, premium):
    """Budgets reached by a server sale and by a client purchase from every grid point"""
    b = grid.points
    server_jump = params.k - params.c_serve + premium
    afford_floor = client_afford_floor(params, model)
    payer = np.maximum(b, afford_floor)
    borrowed = np.maximum(params.k - payer, 0.0) if model.allows_overdraft else 0.0
    client_dest = np.maximum(payer + params.s - params.k - params.alpha * borrowed, 0.0)
    return server_jump, b + server_jump, client_dest


def client_afford_floor(params, model):
    """Smallest budget at which bidding k is feasible"""
    model = LoanModel.parse(model)
    if model is LoanModel.HARD:
        return params.k
    return max(params.k - params.bid_headroom, 0.0)


def bellman_apply(v, z, params, model, grid=None, premium=0.0):
    """One application of the Bellman operator T_z"""
    model = LoanModel.parse(model)
    z = _z(z)
    grid = grid or v.grid
    values = v.values if isinstance(v, ValueFunction) else np.asarray(v, dtype=float)
    if not np.all(np.isfinite(values)):
        raise ValueError("Bellman operator received non-finite values")
    b = grid.points
    server_jump, server_dest, client_dest = _destinations(grid, params, model, premium)

    def lookup(x):
        return np.interp(x, b, values)

    server = params.p_s * (1.0 - z) * (server_jump + params.beta * (lookup(server_dest) - values))
    trade = params.p_c * (params.s - params.k + params.beta * (lookup(client_dest) - values))
    fail = -params.p_c * params.c_lose
    affordable = can_afford(b, params, model)
    client = np.where(affordable, np.maximum(trade, fail), fail)
    new_values = params.beta * values + server + client
    if isinstance(v, ValueFunction):
        return ValueFunction(grid=grid, values=new_values)
    return new_values


def value_iterate(z, params, model, grid, tol=None, max_iters=None, premium=0.0, initial=None):
    """Iterate T_z to its fixed point (sup-norm residual below tol)"""
    tol = Config.VALUE_TOL if tol is None else tol
    max_iters = Config.VALUE_MAX_ITERS if max_iters is None else max_iters
    if tol <= 0:
        raise ValueError(f"Value iteration tolerance must be positive, got {tol}")
    model = LoanModel.parse(model)
    z = _z(z)
    if initial is None:
        values = np.zeros(grid.n)
    else:
        values = np.array(initial.values if isinstance(initial, ValueFunction) else initial, dtype=float)
    residuals = []
    for iteration in range(1, max_iters + 1):
        new_values = bellman_apply(values, z, params, model, grid=grid, premium=premium)
        residual = float(np.max(np.abs(new_values - values)))
        residuals.append(residual)
        values = new_values
        if iteration % 500 == 0:
            logger.debug(f"Value iteration z={z:.4f}: sweep {iteration}, residual {residual:.3e}")
        if residual <= tol:
            logger.debug(f"Value iteration z={z:.4f} converged in {iteration} sweeps")
            return ValueFunction(grid=grid, values=values, iterations=iteration,
                                 residual=residual, residuals=tuple(residuals))
    raise RuntimeError(f"Value iteration did not converge in {max_iters} sweeps "
                       f"(residual {residuals[-1]:.3e}, tol {tol:.1e})")


def win_lose_gap(v, params, model, budgets):
    """v_c_win(b) - v_c_lose(b) at arbitrary budgets"""
    model = LoanModel.parse(model)
    budgets = np.asarray(budgets, dtype=float)
    borrowed = np.maximum(params.k - budgets, 0.0) if model.allows_overdraft else 0.0
    win_budget = np.maximum(budgets + params.s - params.k - params.alpha * borrowed, 0.0)
    v_win = params.beta * v(win_budget) + params.s - params.k
    v_lose = params.beta * v(budgets) - params.c_lose
    return v_win - v_lose


def extract_client_policy(v, z, params, model, tie_tol=None, p_tie=None):
    """Client best response: bid0 below the affordability floor, comparison in the middle band, bidK above"""
    model = LoanModel.parse(model)
    grid = v.grid
    if tie_tol is None:
        tie_tol = 1e-9 * (1.0 + v.sup_norm)
    if p_tie is None and Config.P_TIE is not None:
        p_tie = float(Config.P_TIE)

    floor = client_afford_floor(params, model)
    pinned = params.k <= params.s
    pin = params.k - (params.s - params.k) / params.alpha if pinned else math.inf
    band_hi = min(pin, grid.b_max)

    boundaries = []  # (budget, action starting there)
    if floor > 0:
        boundaries.append((0.0, BID_ZERO))
    ties = []
    if band_hi >= floor:
        pts = grid.points
        inner = pts[(pts > floor) & (pts < band_hi)]
        samples = np.unique(np.concatenate([[floor], inner, [band_hi]]))
        gap = win_lose_gap(v, params, model, samples)
        decide_k = gap >= -tie_tol
        ties = [float(b) for b, g in zip(samples, gap) if abs(g) <= tie_tol]
        boundaries.append((float(floor), BID_K if decide_k[0] else BID_ZERO))
        for j in range(len(samples) - 1):
            if decide_k[j] != decide_k[j + 1]:
                g0, g1 = gap[j], gap[j + 1]
                frac = g0 / (g0 - g1) if g0 != g1 else 0.0
                root = samples[j] + float(np.clip(frac, 0.0, 1.0)) * (samples[j + 1] - samples[j])
                boundaries.append((float(root), BID_K if decide_k[j + 1] else BID_ZERO))
    if pinned:
        boundaries.append((float(max(pin, floor)), BID_K))

    # merge into switch points with alternating actions
    switch_points, actions = [], []
    for budget, action in boundaries:
        if not actions:
            if budget > 0 and action == BID_K:
                actions.append(BID_ZERO)
                switch_points.append(budget)
            actions.append(action)
            continue
        if action == actions[-1]:
            continue
        if switch_points and budget <= switch_points[-1]:
            budget = switch_points[-1]
        switch_points.append(budget)
        actions.append(action)
    if not actions:
        actions = [BID_K]

    return ClientPolicy(switch_points=tuple(switch_points), actions=tuple(actions),
                        tie_points=tuple(ties), p_tie=p_tie,
                        afford_floor=floor, pin_threshold=pin)


def solve_policy(z, params, model, grid, premium=0.0, initial=None, tol=None):
    """Value iteration followed by policy extraction"""
    v = value_iterate(z, params, model, grid, tol=tol, premium=premium, initial=initial)
    return v, extract_client_policy(v, z, params, model)


@dataclass
class ServerCheckReport:
    n_points: int
    violations: list = field(default_factory=list)
    ties: list = field(default_factory=list)

    @property
    def ok(self):
        return not self.violations

    def to_dict(self):
        return {'n_points': self.n_points, 'violations': self.violations,
                'n_ties': len(self.ties), 'ok': self.ok}


def server_best_response_check(v, z, params, premium=0.0, tol=1e-9):
    """Verify that asking k beats asking 0 at every grid budget"""
    z = _z(z)
    b = v.grid.points

    def stage(ask):
        dest = np.maximum(b + ask - params.c_serve, 0.0)
        return (1.0 - z) * (params.beta * v(dest) + ask - params.c_serve) + z * params.beta * v(b)

    ask_zero = stage(0.0)
    ask_k = stage(params.k + premium)
    scale = tol * (1.0 + v.sup_norm)
    report = ServerCheckReport(n_points=len(b))
    report.violations = [float(x) for x in b[ask_zero > ask_k + scale]]
    report.ties = [float(x) for x in b[np.abs(ask_zero - ask_k) <= scale]]
    if report.violations:
        logger.warning(f"Server best response violated at {len(report.violations)} budgets")
    return report


@dataclass(frozen=True)
class ServerBoundReport:
    x_bar: float
    peak_x: float
    peak_value: float

    def to_dict(self):
        return {'x_bar': self.x_bar, 'peak_x': self.peak_x, 'peak_value': self.peak_value}


def server_bid_upper_bound(params, xtol=1e-9):
    """Largest root of c_serve = x * beta^(x - s/(1+alpha) - b_init_max)"""
    shift = params.bid_headroom + params.psi.upper
    log_beta = math.log(params.beta)

    def expected_return(x):
        return x * math.exp((x - shift) * log_beta)

    peak_x = -1.0 / log_beta
    peak = minimize_scalar(lambda x: -expected_return(x), bounds=(0.0, 4.0 * peak_x), method='bounded')
    peak_x = float(peak.x)
    peak_value = expected_return(peak_x)
    if peak_value < params.c_serve:
        raise ValueError(f"No effective server bid bound: max return {peak_value:.4f} < c_serve={params.c_serve}")
    hi = max(1e4, 2.0 * peak_x)
    while expected_return(hi) >= params.c_serve:
        hi *= 2.0
    x_bar = bisect(lambda x: expected_return(x) - params.c_serve, peak_x, hi, xtol=xtol)
    return ServerBoundReport(x_bar=float(x_bar), peak_x=peak_x, peak_value=peak_value)


def expected_value(v, psi):
    """E_psi[v] by quadrature over the discretized regeneration distribution"""
    return float(np.dot(v.grid.discretize(psi), v.values))
