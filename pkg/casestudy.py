"""Two-region photovoltaic sharing market.

Hours in which exactly one region has good weather are the only hours with a
market: the region with bad weather consumes and the other one serves.
"""
import logging
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from config import Config
from market import LoanModel, MarketParams, RegenerationDistribution
from dp_solver import GridSpec
from mfe_solver import TypeProfile, solve_coupled_mfe
from mc_sim import (SimConfig, MarketSimulator, BOTH_GOOD, BOTH_BAD, A_BAD_B_GOOD, A_GOOD_B_BAD)

logger = logging.getLogger(__name__)

TRACE_COLUMNS = ('timestamp', 'region_a_good', 'region_b_good')


def case_study_params(**overrides):
    """s=10, c_serve=5, k=7.5, psi=U[5,10]; remaining constants as in the cluster market"""
    values = dict(s=Config.CASE_SURPLUS, c_serve=Config.CASE_C_SERVE, k=Config.CASE_PRICE_K,
                  psi=RegenerationDistribution.parse(Config.CASE_PSI))
    values.update(overrides)
    return MarketParams.cluster_defaults(**values)


@dataclass(frozen=True)
class JointWeatherProbs:
    p_both_good: float
    p_both_bad: float
    p_a_bad_b_good: float
    p_a_good_b_bad: float

    def __post_init__(self):
        values = self.as_tuple()
        if any(p < 0 for p in values):
            raise ValueError(f"Weather probabilities must be non-negative: {values}")
        if abs(sum(values) - 1.0) > 1e-9:
            raise ValueError(f"Weather probabilities sum to {sum(values)}, expected 1")

    @classmethod
    def parse(cls, text):
        parts = [float(x) for x in str(text).split(',')]
        if len(parts) != 4:
            raise ValueError(f"Expected four weather probabilities, got {text!r}")
        return cls(*parts)

    @classmethod
    def from_counts(cls, counts):
        total = sum(counts)
        if total <= 0:
            raise ValueError("Cannot estimate weather probabilities from an empty trace")
        return cls(*(c / total for c in counts))

    def as_tuple(self):
        """Ordered like the simulator's weather state codes"""
        return (self.p_both_good, self.p_both_bad, self.p_a_bad_b_good, self.p_a_good_b_bad)

    @property
    def mixed(self):
        return self.p_a_bad_b_good + self.p_a_good_b_bad

    def to_dict(self):
        return {'p_both_good': self.p_both_good, 'p_both_bad': self.p_both_bad,
                'p_a_bad_b_good': self.p_a_bad_b_good, 'p_a_good_b_bad': self.p_a_good_b_bad}


@dataclass(frozen=True)
class DaytimeRule:
    first_hour: int = Config.DAYTIME_FIRST_HOUR
    last_hour: int = Config.DAYTIME_LAST_HOUR
    offset_hours: float = Config.DAYTIME_OFFSET_HOURS

    def __post_init__(self):
        if not 0 <= self.first_hour <= self.last_hour <= 23:
            raise ValueError(f"Invalid daytime window {self.first_hour}-{self.last_hour}")

    @classmethod
    def all_hours(cls):
        return cls(first_hour=0, last_hour=23, offset_hours=0.0)

    def mask(self, frame):
        """Daytime rows: sunrise+offset..sunset-offset if known, else the fixed hour window"""
        if 'sunrise' in frame.columns and 'sunset' in frame.columns:
            offset = pd.Timedelta(hours=self.offset_hours)
            sunrise = pd.to_datetime(frame['sunrise'])
            sunset = pd.to_datetime(frame['sunset'])
            return (frame['timestamp'] >= sunrise + offset) & (frame['timestamp'] <= sunset - offset)
        hours = frame['timestamp'].dt.hour
        return (hours >= self.first_hour) & (hours <= self.last_hour)


@dataclass(eq=False)
class WeatherTrace:
    frame: pd.DataFrame

    def __post_init__(self):
        if self.frame.empty:
            raise ValueError("Weather trace has no rows")
        if not self.frame['timestamp'].is_monotonic_increasing or self.frame['timestamp'].duplicated().any():
            raise ValueError("Weather trace timestamps must be strictly increasing")

    def __len__(self):
        return len(self.frame)

    def states(self):
        """Joint weather state code per hour"""
        a = self.frame['region_a_good'].to_numpy(dtype=bool)
        b = self.frame['region_b_good'].to_numpy(dtype=bool)
        return np.select([a & b, ~a & ~b, ~a & b], [BOTH_GOOD, BOTH_BAD, A_BAD_B_GOOD], default=A_GOOD_B_BAD)

    def counts(self):
        states = self.states()
        return tuple(int((states == code).sum()) for code in (BOTH_GOOD, BOTH_BAD, A_BAD_B_GOOD, A_GOOD_B_BAD))

    def joint_probs(self):
        return JointWeatherProbs.from_counts(self.counts())

    def client_hours(self):
        """Hours in which each region buys: A when A is bad and B good, and vice versa"""
        counts = self.counts()
        return counts[A_BAD_B_GOOD], counts[A_GOOD_B_BAD]


def _parse_flag(series, column, true_tokens=None, false_tokens=None):
    """Good-weather column to booleans; numbers and the configured spellings are accepted"""
    true_tokens = set(Config.WEATHER_GOOD_COLUMN_TRUE if true_tokens is None else true_tokens)
    false_tokens = set(Config.WEATHER_GOOD_COLUMN_FALSE if false_tokens is None else false_tokens)
    text = series.astype(str).str.strip().str.lower()
    numeric = pd.to_numeric(series, errors='coerce').astype(float)
    text = text.where(numeric.isna(), numeric.map(lambda v: f"{v:g}"))
    good = text.isin(true_tokens)
    bad = ~(good | text.isin(false_tokens))
    if bad.any():
        row = int(np.flatnonzero(bad.to_numpy())[0]) + 2
        accepted = ', '.join(sorted(true_tokens | false_tokens))
        raise ValueError(f"Malformed weather row {row}: {column} must be one of {accepted}, "
                         f"got {series.iloc[row - 2]!r}")
    return good


def ingest_weather_trace(path, daytime_rule=None):
    """Read a weather CSV and keep its daytime hours.

    Returns (trace, joint probabilities, (client hours A, client hours B)).
    """
    daytime_rule = daytime_rule or DaytimeRule()
    logger.info(f"Reading weather trace from {path}")
    try:
        frame = pd.read_csv(path, dtype=str)
    except Exception as e:
        logger.error(f"Cannot read weather trace {path}: {str(e)}")
        raise ValueError(f"Cannot read weather trace {path}: {e}")
    missing = [c for c in TRACE_COLUMNS if c not in frame.columns]
    if missing:
        raise ValueError(f"Weather trace is missing columns: {', '.join(missing)}")
    if frame.empty:
        raise ValueError("Weather trace has no rows")
    timestamps = pd.to_datetime(frame['timestamp'], errors='coerce')
    if timestamps.isna().any():
        row = int(np.flatnonzero(timestamps.isna().to_numpy())[0]) + 2
        raise ValueError(f"Malformed weather row {row}: bad timestamp {frame['timestamp'].iloc[row - 2]!r}")
    frame['timestamp'] = timestamps
    for column in ('region_a_good', 'region_b_good'):
        frame[column] = _parse_flag(frame[column], column)
    if not (frame['timestamp'].diff().dropna() > pd.Timedelta(0)).all():
        raise ValueError("Weather trace timestamps must be strictly increasing")

    daytime = frame[daytime_rule.mask(frame)].reset_index(drop=True)
    if daytime.empty:
        raise ValueError("No daytime hours left after applying the daytime rule")
    trace = WeatherTrace(daytime)
    probs = trace.joint_probs()
    hours = trace.client_hours()
    logger.info(f"Weather trace: {len(frame)} rows, {len(trace)} daytime, client hours A={hours[0]}, B={hours[1]}")
    return trace, probs, hours


def synthetic_trace(probs, hours, seed=Config.SIM_SEED, start='2016-01-01', daytime_rule=None):
    """Hourly daytime trace whose joint states are drawn i.i.d. from probs"""
    daytime_rule = daytime_rule or DaytimeRule()
    per_day = daytime_rule.last_hour - daytime_rule.first_hour + 1
    days = -(-int(hours) // per_day)
    day_index = pd.date_range(start=start, periods=days, freq='D')
    offsets = pd.to_timedelta(np.arange(daytime_rule.first_hour, daytime_rule.last_hour + 1), unit='h')
    timestamps = (day_index.values[:, None] + offsets.values[None, :]).ravel()[:int(hours)]
    rng = np.random.default_rng(seed)
    states = rng.choice(4, size=len(timestamps), p=np.asarray(probs.as_tuple()))
    a_good = np.isin(states, (BOTH_GOOD, A_GOOD_B_BAD))
    b_good = np.isin(states, (BOTH_GOOD, A_BAD_B_GOOD))
    return pd.DataFrame({'timestamp': pd.to_datetime(timestamps).strftime('%Y-%m-%dT%H:%M:%S'),
                         'region_a_good': a_good.astype(int), 'region_b_good': b_good.astype(int)})


def derive_role_probs(jp, psi=None, labels=('region_a', 'region_b')):
    """Normalize the mixed weather states into client/server probabilities per region"""
    if jp.mixed <= 0:
        raise ValueError("No market: neither region ever has good weather while the other has bad weather")
    psi = RegenerationDistribution.parse(psi if psi is not None else Config.CASE_PSI)
    p_c_a = jp.p_a_bad_b_good / jp.mixed
    return (TypeProfile(type_id=0, p_c=p_c_a, p_s=1.0 - p_c_a, psi=psi, label=labels[0]),
            TypeProfile(type_id=1, p_c=1.0 - p_c_a, p_s=p_c_a, psi=psi, label=labels[1]))


@dataclass(frozen=True)
class SavingsReport:
    client_hours_a: int
    client_hours_b: int
    market_savings: float
    net_metering_a: float
    net_metering_b: float
    trade_ratio_used: float
    currency_unit: float

    @property
    def net_metering_result(self):
        return (self.net_metering_a, self.net_metering_b)

    def to_dict(self):
        return {
            'client_hours_a': self.client_hours_a,
            'client_hours_b': self.client_hours_b,
            'market_savings': self.market_savings,
            'net_metering_a': self.net_metering_a,
            'net_metering_b': self.net_metering_b,
            'trade_ratio_used': self.trade_ratio_used,
            'currency_unit': self.currency_unit,
        }

    def to_text(self):
        return (f"Client hours: A={self.client_hours_a}, B={self.client_hours_b}\n"
                f"Market savings: ${self.market_savings:.2f}/year at trade ratio {self.trade_ratio_used:.2%}\n"
                f"Net metering: A ${self.net_metering_a:.2f}/year, B ${self.net_metering_b:.2f}/year\n")


def savings(client_hours_a, client_hours_b, params, trade_ratio, unit=None, retail_unit=None):
    """Yearly savings of the market against net metering, in dollars.

    unit is the dollar value of one simulated currency unit (2.5 cents by
    default); retail_unit prices one unit of service bought from the grid.
    """
    if not 0.0 <= trade_ratio <= 1.0:
        raise ValueError(f"trade_ratio must lie in [0,1], got {trade_ratio}")
    if client_hours_a < 0 or client_hours_b < 0:
        raise ValueError("Client hours must be non-negative")
    unit = Config.CURRENCY_UNIT_CENTS / 100.0 if unit is None else unit
    retail_unit = Config.NET_METERING_UNIT_CENTS / 100.0 if retail_unit is None else retail_unit
    surplus = client_hours_a * (params.s - params.k) + client_hours_b * (params.k - params.c_serve)
    # servers sell back at their own production cost, so only the buyers' bills remain
    return SavingsReport(
        client_hours_a=int(client_hours_a),
        client_hours_b=int(client_hours_b),
        market_savings=surplus * unit * trade_ratio,
        net_metering_a=-client_hours_a * params.s * retail_unit,
        net_metering_b=-client_hours_b * params.s * retail_unit,
        trade_ratio_used=float(trade_ratio),
        currency_unit=unit,
    )


@dataclass(eq=False)
class CaseStudyResult:
    profiles: tuple
    probs: JointWeatherProbs
    savings: SavingsReport
    coupled: object = None
    simulation: object = None
    flags: list = field(default_factory=list)

    @property
    def trade_ratio(self):
        return self.savings.trade_ratio_used

    def value_frame(self):
        """budget, then value_<type> and bid_<type> per region; None without a coupled solve"""
        if self.coupled is None:
            return None
        frame = None
        for profile, report in zip(self.coupled.profiles, self.coupled.reports):
            name = (profile.label or f"type{profile.type_id}").replace('-', '_').replace(' ', '_')
            points = report.value.grid.points
            part = pd.DataFrame({'budget': points, f"value_{name}": report.value.values,
                                 f"bid_{name}": np.where(report.policy.bids_k(points), 'k', '0')})
            frame = part if frame is None else frame.merge(part, on='budget', how='outer')
        return frame.sort_values('budget').reset_index(drop=True)

    def to_dict(self):
        data = {
            'profiles': [p.to_dict() for p in self.profiles],
            'weather_probs': self.probs.to_dict(),
            'savings': self.savings.to_dict(),
            'flags': list(self.flags),
        }
        if self.coupled is not None:
            data['coupled'] = self.coupled.to_dict()
        if self.simulation is not None:
            data['simulation'] = self.simulation.summary()
        return data


def run_case_study(trace=None, probs=None, client_hours=None, params=None, model=None, mode='solve',
                   n_agents=None, n_steps=None, seed=None, grid_delta=None, daytime_rule=None):
    """Coupled equilibrium and/or two-region simulation followed by the savings report.

    trace may be a path or a WeatherTrace; without one, probs and client_hours
    fall back to the configured weather shares and hour counts.
    """
    if mode not in ('solve', 'simulate', 'both'):
        raise ValueError(f"Case study mode must be solve, simulate or both, got {mode!r}")
    params = params or case_study_params()
    model = LoanModel.parse(model or Config.LOAN_MODEL)
    weather_states = None
    if trace is not None:
        if not isinstance(trace, WeatherTrace):
            trace, trace_probs, trace_hours = ingest_weather_trace(trace, daytime_rule)
        else:
            trace_probs, trace_hours = trace.joint_probs(), trace.client_hours()
        probs = probs or trace_probs
        client_hours = client_hours or trace_hours
        weather_states = tuple(int(s) for s in trace.states())
    probs = probs or JointWeatherProbs.parse(Config.CASE_WEATHER_PROBS)
    client_hours = client_hours or tuple(int(x) for x in Config.CASE_CLIENT_HOURS.split(','))
    if probs.mixed <= 0:
        logger.warning("Weather never splits the regions, so no hour has a market")
        return CaseStudyResult(profiles=(), probs=probs, savings=savings(0, 0, params, 0.0), flags=params.flags())
    profiles = derive_role_probs(probs, psi=params.psi)
    logger.info(f"Case study: p_c A={profiles[0].p_c:.4f}, B={profiles[1].p_c:.4f}, model={model.value}")

    coupled = simulation = None
    trade_ratio = None
    if mode in ('solve', 'both'):
        grid = GridSpec.for_params(params, delta=grid_delta) if grid_delta is not None else None
        coupled = solve_coupled_mfe(profiles, params, model, grid=grid)
        trade_ratio = coupled.joint_trade_ratio
        logger.info(f"Coupled MFE: z=({coupled.reports[0].z_star:.5f}, {coupled.reports[1].z_star:.5f}), "
                    f"joint trade ratio {trade_ratio:.4f}")
    if mode in ('simulate', 'both'):
        sim_config = SimConfig(
            n_agents=n_agents or Config.SIM_AGENTS,
            n_steps=n_steps or Config.SIM_STEPS,
            params=params,
            model=model,
            seed=Config.SIM_SEED if seed is None else seed,
            grid_delta=grid_delta or Config.GRID_DELTA,
            profiles=profiles,
            weather_probs=None if weather_states else probs.as_tuple(),
            weather_states=weather_states,
        )
        simulation = MarketSimulator(sim_config).run()
        trade_ratio = simulation.terminal_trade_ratio(steps=max(100, sim_config.n_steps // 10))
        if np.isnan(trade_ratio):
            trade_ratio = 0.0
    report = savings(client_hours[0], client_hours[1], params, trade_ratio)
    logger.info(f"Savings: ${report.market_savings:.2f}/year")
    return CaseStudyResult(profiles=profiles, probs=probs, savings=report, coupled=coupled,
                           simulation=simulation, flags=params.flags())
