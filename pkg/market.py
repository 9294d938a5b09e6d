"""Market mechanics: roles, bids, trade resolution and budget updates.

Everything here is a pure function of its arguments (plus an explicit numpy
Generator for regeneration), so it is safe to call from any thread. The
budget update functions accept scalars or numpy arrays; scalars come back as
plain floats.
"""
import re
import logging
from dataclasses import dataclass, field, asdict, replace
from enum import Enum

import numpy as np

logger = logging.getLogger(__name__)

# Slack for floating point rounding at the bid-cap boundary
BUDGET_EPS = 1e-9


class LoanModel(Enum):
    HARD = 'hard'
    BANK = 'bank'
    PEER_LOAN = 'peer-loan'

    @classmethod
    def parse(cls, value):
        """Accept 'hard', 'bank', 'peer-loan' and the usual spellings of the latter"""
        if isinstance(value, LoanModel):
            return value
        key = str(value).strip().lower().replace('_', '-')
        aliases = {'peer': 'peer-loan', 'loan': 'peer-loan', 'peerloan': 'peer-loan'}
        key = aliases.get(key, key)
        for model in cls:
            if model.value == key:
                return model
        raise ValueError(f"Unknown loan model: {value!r} (expected hard, bank or peer-loan)")

    @property
    def allows_overdraft(self):
        return self is not LoanModel.HARD


_UNIFORM_RE = re.compile(r'^U\[\s*([-+0-9.eE]+)\s*,\s*([-+0-9.eE]+)\s*\]$')
_TABLE_RE = re.compile(r'^T\[(.*)\]$')


@dataclass(frozen=True)
class RegenerationDistribution:
    """Budget distribution of a newly entering agent.

    kind is 'uniform' (on [lo, hi]), 'point' (lo == hi) or 'tabulated'
    (atoms ``values`` with probabilities ``probs``).
    """
    kind: str
    lo: float
    hi: float
    values: tuple = ()
    probs: tuple = ()

    def __post_init__(self):
        if self.kind not in ('uniform', 'point', 'tabulated'):
            raise ValueError(f"Unknown regeneration kind: {self.kind}")
        if not (np.isfinite(self.lo) and np.isfinite(self.hi)):
            raise ValueError("Regeneration support must be bounded")
        if self.lo < 0 or self.hi < self.lo:
            raise ValueError(f"Invalid regeneration support [{self.lo}, {self.hi}]")
        if self.kind == 'uniform' and self.hi == self.lo:
            raise ValueError("Uniform regeneration needs lo < hi; use a point mass instead")
        if self.kind == 'tabulated':
            if len(self.values) == 0 or len(self.values) != len(self.probs):
                raise ValueError("Tabulated regeneration needs matching values and probs")
            if any(p < 0 for p in self.probs) or abs(sum(self.probs) - 1.0) > 1e-9:
                raise ValueError("Tabulated regeneration probabilities must be >= 0 and sum to 1")
            if min(self.values) < 0:
                raise ValueError("Tabulated regeneration values must be >= 0")

    @classmethod
    def uniform(cls, lo, hi):
        return cls('uniform', float(lo), float(hi))

    @classmethod
    def point(cls, value):
        return cls('point', float(value), float(value))

    @classmethod
    def tabulated(cls, values, probs):
        values = tuple(float(v) for v in values)
        probs = tuple(float(p) for p in probs)
        lo = min(values) if values else 0.0
        hi = max(values) if values else 0.0
        return cls('tabulated', lo, hi, values, probs)

    @classmethod
    def parse(cls, text):
        """Parse 'U[0,5]', a bare number (point mass) or 'T[v1:p1,v2:p2,...]'"""
        if isinstance(text, RegenerationDistribution):
            return text
        if isinstance(text, dict):
            return cls.from_dict(text)
        raw = str(text).strip()
        match = _UNIFORM_RE.match(raw)
        if match:
            return cls.uniform(float(match.group(1)), float(match.group(2)))
        match = _TABLE_RE.match(raw)
        if match:
            values, probs = [], []
            for item in match.group(1).split(','):
                value, prob = item.split(':')
                values.append(float(value))
                probs.append(float(prob))
            return cls.tabulated(values, probs)
        try:
            return cls.point(float(raw))
        except ValueError:
            raise ValueError(f"Cannot parse regeneration distribution: {text!r}")

    @property
    def label(self):
        if self.kind == 'uniform':
            return f"U[{self.lo:g},{self.hi:g}]"
        if self.kind == 'point':
            return f"{self.lo:g}"
        atoms = ','.join(f"{v:g}:{p:g}" for v, p in zip(self.values, self.probs))
        return f"T[{atoms}]"

    @property
    def upper(self):
        """Upper end of the support (the bound on initial budgets)"""
        return self.hi

    def mean(self):
        if self.kind == 'tabulated':
            return float(np.dot(self.values, self.probs))
        return 0.5 * (self.lo + self.hi)

    def sample(self, rng, size=None):
        if self.kind == 'uniform':
            return rng.uniform(self.lo, self.hi, size=size)
        if self.kind == 'point':
            return self.lo if size is None else np.full(size, self.lo)
        return rng.choice(np.asarray(self.values), size=size, p=np.asarray(self.probs))

    def to_dict(self):
        data = {'kind': self.kind, 'lo': self.lo, 'hi': self.hi}
        if self.kind == 'tabulated':
            data['values'] = list(self.values)
            data['probs'] = list(self.probs)
        return data

    @classmethod
    def from_dict(cls, data):
        kind = data.get('kind', 'uniform')
        if kind == 'tabulated':
            return cls.tabulated(data['values'], data['probs'])
        if kind == 'point':
            return cls.point(data['lo'])
        return cls.uniform(data['lo'], data['hi'])


@dataclass(frozen=True)
class MarketParams:
    p_c: float
    p_s: float
    beta: float
    alpha: float
    s: float
    c_serve: float
    c_lose: float
    k: float
    psi: RegenerationDistribution = field(default_factory=lambda: RegenerationDistribution.uniform(0, 5))

    def __post_init__(self):
        if not (0 < self.p_c < 1 and 0 < self.p_s < 1):
            raise ValueError(f"Role probabilities must lie in (0,1): p_c={self.p_c}, p_s={self.p_s}")
        if abs(self.p_c + self.p_s - 1.0) > 1e-9:
            raise ValueError(f"p_c + p_s must equal 1, got {self.p_c + self.p_s}")
        if not 0 < self.beta < 1:
            raise ValueError(f"beta must lie in (0,1), got {self.beta}")
        if self.alpha < 1:
            raise ValueError(f"alpha must be >= 1, got {self.alpha}")
        for name in ('s', 'c_serve', 'c_lose', 'k'):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative, got {getattr(self, name)}")

    @classmethod
    def cluster_defaults(cls, **overrides):
        """Computing-cluster defaults: beta=0.98, p=0.5, alpha=1.1, s=8, c_serve=6, c_lose=0.5, k=7, U[0,5]"""
        values = dict(p_c=0.5, p_s=0.5, beta=0.98, alpha=1.1, s=8.0, c_serve=6.0,
                      c_lose=0.5, k=7.0, psi=RegenerationDistribution.uniform(0, 5))
        values.update(overrides)
        if 'p_c' in overrides and 'p_s' not in overrides:
            values['p_s'] = 1.0 - values['p_c']
        return cls(**values)

    def with_price(self, k):
        return replace(self, k=float(k))

    def with_psi(self, psi):
        return replace(self, psi=RegenerationDistribution.parse(psi))

    def with_roles(self, p_c):
        return replace(self, p_c=float(p_c), p_s=1.0 - float(p_c))

    @property
    def bid_headroom(self):
        """How far a client may bid above her budget: s/(1+alpha)"""
        return self.s / (1.0 + self.alpha)

    def flags(self):
        """Violations of the non-trivial price band c_serve <= k, s - k >= c_lose"""
        flags = []
        if self.k < self.c_serve:
            flags.append(f"k={self.k:g} below c_serve={self.c_serve:g}: servers lose on every trade")
        if self.s - self.k < self.c_lose:
            flags.append(f"s-k={self.s - self.k:g} below c_lose={self.c_lose:g}: trades are nearly worthless to clients")
        return flags

    def to_dict(self):
        data = asdict(self)
        data['psi'] = self.psi.label
        return data

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        data['psi'] = RegenerationDistribution.parse(data.get('psi', 'U[0,5]'))
        if 'p_s' not in data and 'p_c' in data:
            data['p_s'] = 1.0 - float(data['p_c'])
        return cls(**data)


@dataclass
class AgentState:
    budget: float
    alive: bool = True
    type_id: int = 0

    def __post_init__(self):
        if self.budget < 0:
            raise ValueError(f"Agent budget must be non-negative, got {self.budget}")


@dataclass(frozen=True)
class TradeOutcome:
    traded: bool
    price_paid: float
    overdraft: float
    client_delta: float
    server_delta: float
    client_penalty_incurred: bool

    def to_dict(self):
        return asdict(self)


def _as_output(value):
    return float(value) if np.ndim(value) == 0 else value


def resolve_trade(x_c, x_s):
    """A trade happens iff the client bid covers the server ask"""
    if x_c < 0 or x_s < 0:
        raise ValueError(f"Bids must be non-negative, got x_c={x_c}, x_s={x_s}")
    return bool(x_c >= x_s)


def overdraft(b, k):
    """Amount borrowed to pay k out of budget b: (k - b)^+"""
    return _as_output(np.maximum(np.asarray(k, dtype=float) - np.asarray(b, dtype=float), 0.0))


def max_client_bid(b, params, model):
    """Largest bid that keeps the post-trade budget non-negative"""
    if np.any(np.asarray(b) < 0):
        raise ValueError("Budget must be non-negative")
    model = LoanModel.parse(model)
    b = np.asarray(b, dtype=float)
    if model is LoanModel.HARD:
        return _as_output(b)
    return _as_output(b + params.bid_headroom)


def can_afford(b, params, model):
    """Whether bidding the unified price k is feasible at budget b"""
    cap = np.asarray(max_client_bid(b, params, model))
    result = params.k <= cap + BUDGET_EPS
    return bool(result) if np.ndim(result) == 0 else result


def client_budget_update(b, params, model):
    """Client budget after buying at price k: b + s - k - alpha*(k-b)^+"""
    model = LoanModel.parse(model)
    b = np.asarray(b, dtype=float)
    if not np.all(can_afford(b, params, model)):
        raise ValueError(f"Bid-cap violation: price k={params.k} exceeds the {model.value} bid cap")
    borrowed = np.maximum(params.k - b, 0.0) if model.allows_overdraft else 0.0
    result = b + params.s - params.k - params.alpha * borrowed
    if np.any(result < -BUDGET_EPS):
        raise ValueError("Bid-cap violation: post-trade client budget would be negative")
    return _as_output(np.maximum(result, 0.0))


def server_budget_update(b_server, b_client, params, model):
    """Server budget after selling at k; under peer loans the overdraft repayment goes to the server"""
    model = LoanModel.parse(model)
    result = np.asarray(b_server, dtype=float) + params.k - params.c_serve
    if model is LoanModel.PEER_LOAN:
        result = result + params.alpha * np.maximum(params.k - np.asarray(b_client, dtype=float), 0.0)
    return _as_output(result)


def settle_trade(x_c, b_client, b_server, params, model):
    """Resolve client-server matches at ask k and book the budget deltas.

    Scalar inputs give one outcome of plain floats. Array inputs settle every
    match at once and each outcome field is an array over the matches.
    """
    model = LoanModel.parse(model)
    if np.ndim(x_c) == 0 and np.ndim(b_client) == 0 and np.ndim(b_server) == 0:
        if not resolve_trade(x_c, params.k):
            return TradeOutcome(traded=False, price_paid=0.0, overdraft=0.0, client_delta=0.0,
                                server_delta=0.0, client_penalty_incurred=True)
        borrowed = overdraft(b_client, params.k) if model.allows_overdraft else 0.0
        client_after = client_budget_update(b_client, params, model)
        server_after = server_budget_update(b_server, b_client, params, model)
        return TradeOutcome(
            traded=True,
            price_paid=params.k,
            overdraft=float(borrowed),
            client_delta=client_after - b_client,
            server_delta=server_after - b_server,
            client_penalty_incurred=False,
        )

    x_c, b_client, b_server = np.broadcast_arrays(np.asarray(x_c, dtype=float),
                                                  np.asarray(b_client, dtype=float),
                                                  np.asarray(b_server, dtype=float))
    if np.any(x_c < 0):
        raise ValueError("Bids must be non-negative")
    traded = x_c >= params.k
    borrowed = np.zeros(x_c.shape)
    client_delta = np.zeros(x_c.shape)
    server_delta = np.zeros(x_c.shape)
    if traded.any():
        payer, seller = b_client[traded], b_server[traded]
        if model.allows_overdraft:
            borrowed[traded] = overdraft(payer, params.k)
        client_delta[traded] = np.asarray(client_budget_update(payer, params, model)) - payer
        server_delta[traded] = np.asarray(server_budget_update(seller, payer, params, model)) - seller
    return TradeOutcome(
        traded=traded,
        price_paid=np.where(traded, params.k, 0.0),
        overdraft=borrowed,
        client_delta=client_delta,
        server_delta=server_delta,
        client_penalty_incurred=~traded,
    )


def wealth_delta(outcome, model):
    """Change in total system wealth caused by a trade, per match for array outcomes"""
    if not np.all(outcome.traded):
        raise ValueError("wealth_delta is only defined for traded outcomes")
    return _as_output(np.asarray(outcome.client_delta) + np.asarray(outcome.server_delta))


def regenerate(rng, psi, size=None):
    """Budget of a newly entering agent, or an array of `size` of them"""
    if size is None:
        return float(psi.sample(rng))
    return np.asarray(psi.sample(rng, size), dtype=float)
