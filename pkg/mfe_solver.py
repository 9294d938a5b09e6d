"""Budget Markov kernel, stationary distribution and mean field equilibrium search.

gamma(z) = pi_z(bid-0 region of the best response to z). A mean field
equilibrium is a fixed point z* = gamma(z*). For peer loans gamma also
carries the mean-field premium a server collects from overdrawing clients.
"""
import math
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy import sparse
from scipy.optimize import bisect

from config import Config
from market import BUDGET_EPS, LoanModel, RegenerationDistribution
from dp_solver import (GridSpec, ClientPolicy, ValueFunction, _destinations, _z,
                       expected_value, solve_policy)

logger = logging.getLogger(__name__)


@dataclass(eq=False)
class BudgetKernel:
    """P = transfer + (1-beta) * 1 psi^T; transfer rows sum to beta."""
    grid: GridSpec
    beta: float
    transfer: sparse.csr_matrix
    regen: np.ndarray

    @property
    def rows(self):
        return [self.row(i) for i in range(self.grid.n)]

    def row(self, i):
        """(destination index, probability) pairs of row i, regeneration included"""
        start, end = self.transfer.indptr[i], self.transfer.indptr[i + 1]
        entries = dict(zip(self.transfer.indices[start:end].tolist(), self.transfer.data[start:end].tolist()))
        for j in np.flatnonzero(self.regen):
            entries[int(j)] = entries.get(int(j), 0.0) + (1.0 - self.beta) * float(self.regen[j])
        return sorted(entries.items())

    def row_sums(self):
        return np.asarray(self.transfer.sum(axis=1)).ravel() + (1.0 - self.beta) * self.regen.sum()

    def pushforward(self, mass):
        """One-step budget distribution starting from ``mass``"""
        mass = np.asarray(mass, dtype=float)
        return self.transfer.T @ mass + (1.0 - self.beta) * mass.sum() * self.regen


@dataclass(eq=False)
class StationaryDistribution:
    grid: GridSpec
    mass: np.ndarray
    iterations: int = 0
    residual: float = float('nan')

    def __post_init__(self):
        mass = np.asarray(self.mass, dtype=float)
        if np.any(mass < -1e-15):
            raise ValueError("Stationary mass must be non-negative")
        if abs(mass.sum() - 1.0) > 1e-8:
            raise ValueError(f"Stationary mass sums to {mass.sum()}, expected 1")
        self.mass = np.maximum(mass, 0.0)

    def cdf(self):
        return np.cumsum(self.mass)

    def mean(self):
        return float(np.dot(self.grid.points, self.mass))

    def quantile(self, q):
        idx = np.searchsorted(self.cdf(), q, side='left')
        return float(self.grid.points[min(idx, self.grid.n - 1)])

    def doeblin_gap(self, psi_mass, beta):
        """Smallest pi(cell) - (1-beta) psi(cell); non-negative when the floor holds"""
        return float(np.min(self.mass - (1.0 - beta) * psi_mass))

    def to_frame(self):
        return pd.DataFrame({'budget': self.grid.points, 'mass': self.mass, 'cdf': self.cdf()})


@dataclass(frozen=True)
class TypeProfile:
    type_id: int
    p_c: float
    p_s: float
    psi: RegenerationDistribution
    label: str = ''

    def __post_init__(self):
        if abs(self.p_c + self.p_s - 1.0) > 1e-9:
            raise ValueError(f"Profile {self.label or self.type_id}: p_c + p_s must equal 1")

    def to_dict(self):
        return {'type_id': self.type_id, 'p_c': self.p_c, 'p_s': self.p_s,
                'psi': self.psi.label, 'label': self.label}


def budget_kernel(z, policy, params, model, grid, premium=0.0):
    """Transition kernel of a generic agent's budget under the client policy"""
    model = LoanModel.parse(model)
    z = _z(z)
    n = grid.n
    src = np.arange(n)
    bid_zero = policy.bid_zero_fraction(grid)
    _, server_dest, client_dest = _destinations(grid, params, model, premium)
    if np.any(server_dest < -BUDGET_EPS):
        raise ValueError("Server budget would turn negative (k below c_serve at low budgets)")

    stay = params.beta * (params.p_s * z + params.p_c * bid_zero)
    client = params.beta * params.p_c * (1.0 - bid_zero)
    server = np.full(n, params.beta * params.p_s * (1.0 - z))

    c_lo, c_hi, c_w = grid.split(client_dest)
    s_lo, s_hi, s_w = grid.split(server_dest)
    rows = np.concatenate([src, src, src, src, src])
    cols = np.concatenate([src, c_lo, c_hi, s_lo, s_hi])
    data = np.concatenate([stay, client * (1.0 - c_w), client * c_w, server * (1.0 - s_w), server * s_w])
    keep = data > 0
    transfer = sparse.coo_matrix((data[keep], (rows[keep], cols[keep])), shape=(n, n)).tocsr()
    transfer.sum_duplicates()
    return BudgetKernel(grid=grid, beta=params.beta, transfer=transfer, regen=grid.discretize(params.psi))


def stationary_distribution(kernel, psi=None, beta=None, tol=None, max_iters=None):
    """Power iteration started from the regeneration distribution; psi overrides the kernel's for this call only"""
    tol = Config.STATIONARY_TOL if tol is None else tol
    max_iters = Config.STATIONARY_MAX_ITERS if max_iters is None else max_iters
    regen = kernel.regen if psi is None else kernel.grid.discretize(RegenerationDistribution.parse(psi))
    if beta is not None and abs(beta - kernel.beta) > 1e-15:
        raise ValueError(f"Kernel was built with beta={kernel.beta}, got beta={beta}")
    transfer_t = kernel.transfer.T.tocsr()
    floor = (1.0 - kernel.beta) * regen
    mass = regen.copy()
    residual = math.inf
    for iteration in range(1, max_iters + 1):
        new_mass = transfer_t @ mass + floor * mass.sum()
        residual = float(np.abs(new_mass - mass).sum())
        mass = new_mass
        if residual <= tol:
            mass = mass / mass.sum()
            return StationaryDistribution(grid=kernel.grid, mass=mass, iterations=iteration, residual=residual)
    raise RuntimeError(f"Power iteration did not converge in {max_iters} steps (L1 residual {residual:.3e})")


def stationary_by_regeneration_series(kernel, truncation=1e-8):
    """pi = sum_t (1-beta) beta^t psi Q^t, truncated once beta^t < truncation"""
    transfer_t = kernel.transfer.T.tocsr()
    term = (1.0 - kernel.beta) * kernel.regen
    total = term.copy()
    weight = 1.0
    while weight >= truncation:
        term = transfer_t @ term
        total += term
        weight *= kernel.beta
    return StationaryDistribution(grid=kernel.grid, mass=total / total.sum())


def premium_estimate(pi, policy, params):
    """Mean overdraft repayment a server collects per trade, E[alpha (k-B)^+ | client bids k]"""
    weights = pi.mass * (1.0 - policy.bid_zero_fraction(pi.grid))
    if weights.sum() <= 0:
        return 0.0
    repay = params.alpha * np.maximum(params.k - pi.grid.points, 0.0)
    return float(np.dot(weights, repay) / weights.sum())


@dataclass(eq=False)
class BeliefEvaluation:
    z: float
    gamma: float
    value: ValueFunction
    policy: ClientPolicy
    kernel: BudgetKernel
    pi: StationaryDistribution
    premium: float = 0.0


@dataclass(eq=False)
class FixedPointReport:
    z_star: float
    residual: float
    iterations: int
    trade_ratio: float
    policy: ClientPolicy
    value: ValueFunction
    pi: StationaryDistribution
    trace: list = field(default_factory=list)
    converged: bool = True
    method: str = 'damped'
    premium: float = 0.0
    expected_value: float = float('nan')
    flags: list = field(default_factory=list)

    def to_dict(self):
        return {
            'z_star': self.z_star,
            'residual': self.residual,
            'iterations': self.iterations,
            'trade_ratio': self.trade_ratio,
            'converged': self.converged,
            'method': self.method,
            'premium': self.premium,
            'expected_value': self.expected_value,
            'mean_budget': self.pi.mean(),
            'policy': self.policy.to_dict(),
            'trace': [{'z': z, 'gamma': g} for z, g in self.trace],
            'flags': list(self.flags),
        }


class MFESolver:
    """Evaluates gamma and searches its fixed points for one market configuration"""

    def __init__(self, params, model, grid=None, value_tol=None, premium_tol=1e-6, premium_rounds=25):
        self.params = params
        self.model = LoanModel.parse(model)
        self.grid = grid or GridSpec.for_params(params)
        self.value_tol = value_tol
        self.premium_tol = premium_tol
        self.premium_rounds = premium_rounds
        self._warm = None
        self._premium = 0.0
        for flag in params.flags():
            logger.warning(f"Parameter band: {flag}")

    def clone(self):
        return MFESolver(self.params, self.model, self.grid, self.value_tol,
                         self.premium_tol, self.premium_rounds)

    def evaluate(self, z, premium=None):
        """Best response, kernel and stationary distribution at belief z"""
        z = _z(z)
        fixed_premium = premium is not None
        premium = premium if fixed_premium else (self._premium if self.model is LoanModel.PEER_LOAN else 0.0)
        for round_ in range(self.premium_rounds):
            value, policy = solve_policy(z, self.params, self.model, self.grid,
                                         premium=premium, initial=self._warm, tol=self.value_tol)
            self._warm = value
            kernel = budget_kernel(z, policy, self.params, self.model, self.grid, premium=premium)
            pi = stationary_distribution(kernel)
            if self.model is not LoanModel.PEER_LOAN or fixed_premium:
                break
            new_premium = premium_estimate(pi, policy, self.params)
            logger.debug(f"Peer-loan premium round {round_ + 1}: {premium:.6f} -> {new_premium:.6f}")
            if abs(new_premium - premium) <= self.premium_tol:
                break
            premium = new_premium
        self._premium = premium
        gamma_z = float(np.dot(pi.mass, policy.bid_zero_fraction(self.grid)))
        return BeliefEvaluation(z=z, gamma=min(max(gamma_z, 0.0), 1.0), value=value, policy=policy,
                                kernel=kernel, pi=pi, premium=premium)

    def gamma(self, z):
        return self.evaluate(z).gamma

    def gamma_curve(self, z_values, workers=None):
        """gamma at several beliefs; independent evaluations run on a thread pool"""
        workers = workers or Config.WORKERS
        z_values = list(z_values)
        if workers <= 1:
            return [self.clone().gamma(z) for z in z_values]
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(lambda z: self.clone().gamma(z), z_values))

    def _report(self, evaluation, iterations, trace, method, converged=True):
        return FixedPointReport(
            z_star=evaluation.z,
            residual=abs(evaluation.gamma - evaluation.z),
            iterations=iterations,
            trade_ratio=1.0 - evaluation.z,
            policy=evaluation.policy,
            value=evaluation.value,
            pi=evaluation.pi,
            trace=list(trace),
            converged=converged,
            method=method,
            premium=evaluation.premium,
            expected_value=expected_value(evaluation.value, self.params.psi),
            flags=self.params.flags(),
        )

    def solve(self, z0=None, damping=None, tol=None, max_iters=None):
        """Damped fixed-point iteration with a bisection fallback on gamma(z) - z"""
        z = Config.MFE_Z0 if z0 is None else float(z0)
        damping = Config.MFE_DAMPING if damping is None else damping
        tol = Config.MFE_TOL if tol is None else tol
        max_iters = Config.MFE_MAX_ITERS if max_iters is None else max_iters
        if not 0.0 <= z <= 1.0:
            raise ValueError(f"z0 must lie in [0,1], got {z}")
        if not 0.0 < damping <= 1.0:
            raise ValueError(f"damping must lie in (0,1], got {damping}")

        logger.info(f"Solving MFE: model={self.model.value}, k={self.params.k:g}, "
                    f"psi={self.params.psi.label}, z0={z:.3f}")
        trace = []
        evaluations = {}
        sign_changes = 0
        previous_gap = None
        for iteration in range(1, max_iters + 1):
            evaluation = self.evaluate(z)
            evaluations[z] = evaluation
            gap = evaluation.gamma - z
            trace.append((z, evaluation.gamma))
            logger.info(f"MFE iteration {iteration}: z={z:.6f}, gamma={evaluation.gamma:.6f}")
            if abs(gap) <= tol:
                return self._report(evaluation, iteration, trace, 'damped')
            if previous_gap is not None and np.sign(gap) != np.sign(previous_gap):
                sign_changes += 1
                if sign_changes >= 4:
                    logger.info("Damped iteration oscillates, switching to bisection")
                    break
            previous_gap = gap
            z = min(max((1.0 - damping) * z + damping * evaluation.gamma, 0.0), 1.0)
        return self._bisect(trace, evaluations, tol, len(trace))

    def _bisect(self, trace, evaluations, tol, iterations):
        def gap(z):
            evaluation = self.evaluate(z)
            evaluations[z] = evaluation
            trace.append((z, evaluation.gamma))
            return evaluation.gamma - z

        for end in (0.0, 1.0):
            if end not in evaluations:
                gap(end)
        gaps = {z: ev.gamma - z for z, ev in evaluations.items()}
        for z, g in gaps.items():
            if abs(g) <= tol:
                return self._report(evaluations[z], iterations, trace, 'bisection')
        above = [z for z, g in gaps.items() if g > 0]
        below = [z for z, g in gaps.items() if g < 0]
        if not above or not below:
            best = min(evaluations.values(), key=lambda ev: abs(ev.gamma - ev.z))
            logger.error("No sign bracket for gamma(z) - z; reporting the closest point")
            return self._report(best, iterations, trace, 'bisection', converged=False)
        lo, hi = min(((a, b) for a in above for b in below), key=lambda pair: abs(pair[0] - pair[1]))
        a, b = sorted((lo, hi))
        root = bisect(gap, a, b, xtol=tol * 0.1, maxiter=100, disp=False)
        evaluation = evaluations.get(root) or self.evaluate(root)
        converged = abs(evaluation.gamma - evaluation.z) <= tol
        if not converged:
            logger.error(f"Bisection ended at z={root:.6f} with residual {abs(evaluation.gamma - root):.2e}")
        return self._report(evaluation, iterations + len(trace), trace, 'bisection', converged=converged)

    def sweep_equilibria(self, starts=(0.0, 0.25, 0.5, 0.75, 1.0), tol=None, workers=None):
        """Solve from several starting beliefs and keep the distinct fixed points"""
        tol = Config.MFE_TOL if tol is None else tol
        workers = workers or Config.WORKERS
        with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
            reports = list(pool.map(lambda z0: self.clone().solve(z0=z0, tol=tol), starts))
        distinct = []
        for report in sorted((r for r in reports if r.converged), key=lambda r: r.z_star):
            if not distinct or abs(report.z_star - distinct[-1].z_star) > 10 * tol:
                distinct.append(report)
        logger.info(f"Found {len(distinct)} distinct equilibria from {len(starts)} starts")
        return distinct


def gamma(z, params, model, grid=None):
    return MFESolver(params, model, grid).gamma(z)


def solve_mfe(params, model, z0=None, damping=None, tol=None, max_iters=None, grid=None):
    return MFESolver(params, model, grid).solve(z0=z0, damping=damping, tol=tol, max_iters=max_iters)


@dataclass(eq=False)
class CoupledReport:
    reports: tuple
    profiles: tuple
    converged: bool
    iterations: int
    trace: list

    @property
    def joint_trade_ratio(self):
        """Share of cross-type matches that trade (type A is the client w.p. p_c of A)"""
        a, b = self.profiles
        ra, rb = self.reports
        return a.p_c * ra.trade_ratio + a.p_s * rb.trade_ratio

    def to_dict(self):
        return {
            'converged': self.converged,
            'iterations': self.iterations,
            'joint_trade_ratio': self.joint_trade_ratio,
            'profiles': [p.to_dict() for p in self.profiles],
            'reports': [r.to_dict() for r in self.reports],
            'trace': [{'z_a': za, 'z_b': zb, 'gamma_a': ga, 'gamma_b': gb} for za, zb, ga, gb in self.trace],
        }


def solve_coupled_mfe(profiles, params, model, tol=None, damping=None, max_iters=None, grid=None,
                      z0=(1.0, 1.0)):
    """Two-type equilibrium; each type's servers face clients of the other type"""
    if len(profiles) != 2:
        raise ValueError(f"Coupled equilibrium needs exactly two profiles, got {len(profiles)}")
    tol = Config.MFE_TOL if tol is None else tol
    damping = Config.MFE_DAMPING if damping is None else damping
    max_iters = Config.MFE_MAX_ITERS if max_iters is None else max_iters
    model = LoanModel.parse(model)

    type_params = [params.with_roles(p.p_c).with_psi(p.psi) for p in profiles]
    solvers = [MFESolver(tp, model, grid or GridSpec.for_params(tp)) for tp in type_params]
    z = list(z0)
    premiums = [0.0, 0.0]
    trace = []
    evaluations = None
    for iteration in range(1, max_iters + 1):
        # type A's servers meet type B clients, so A's server-side belief is z_B
        evaluations = [solvers[0].evaluate(z[1], premium=premiums[0]),
                       solvers[1].evaluate(z[0], premium=premiums[1])]
        gammas = [ev.gamma for ev in evaluations]
        # the DP of type A is solved at z_B; its own bid-0 mass is gamma_A
        trace.append((z[0], z[1], gammas[0], gammas[1]))
        residuals = [abs(gammas[0] - z[0]), abs(gammas[1] - z[1])]
        logger.info(f"Coupled iteration {iteration}: z=({z[0]:.5f}, {z[1]:.5f}), "
                    f"gamma=({gammas[0]:.5f}, {gammas[1]:.5f})")
        if max(residuals) <= tol:
            break
        if model is LoanModel.PEER_LOAN:
            premiums = [premium_estimate(evaluations[1].pi, evaluations[1].policy, type_params[1]),
                        premium_estimate(evaluations[0].pi, evaluations[0].policy, type_params[0])]
        z = [min(max((1.0 - damping) * z[i] + damping * gammas[i], 0.0), 1.0) for i in range(2)]
    else:
        last = max(abs(ev.gamma - zi) for ev, zi in zip(evaluations, z))
        logger.error(f"Coupled equilibrium did not converge in {max_iters} iterations (residual {last:.3e})")
        raise RuntimeError(f"Coupled equilibrium did not converge in {max_iters} iterations, "
                           f"last residual {last:.3e}")

    converged = max(abs(ev.gamma - zi) for ev, zi in zip(evaluations, z)) <= tol
    reports = []
    for i, (solver, evaluation) in enumerate(zip(solvers, evaluations)):
        report = solver._report(evaluation, len(trace), [(t[i], t[2 + i]) for t in trace], 'coupled', converged)
        # evaluation.z is the opponent's belief; the report belongs to this type's own z
        report.z_star = z[i]
        report.residual = abs(evaluation.gamma - z[i])
        report.trade_ratio = 1.0 - z[i]
        reports.append(report)
    return CoupledReport(reports=tuple(reports), profiles=tuple(profiles), converged=converged,
                         iterations=len(trace), trace=trace)
