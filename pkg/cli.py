"""Command line entry point: solve, simulate, sweep, case-study and check.

Configuration is layered: Config defaults, then a JSON file, then flags.
Every run writes its artifacts plus a manifest into the output directory and
is recorded in the run registry.
"""
import os
import sys
import json
import copy
import logging
from datetime import datetime
from dataclasses import dataclass, field, replace

import click
import numpy as np
import pandas as pd

from config import Config
from market import LoanModel, MarketParams, RegenerationDistribution
from dp_solver import GridSpec
from mfe_solver import MFESolver
from mc_sim import SimConfig, MarketSimulator, sweep, parse_k_values, parse_psi_list
from casestudy import case_study_params, run_case_study
from theory_checks import run_checks
from models import RunSession, SweepCell
from db import get_db_session
import reports

logger = logging.getLogger(__name__)

MODES = ('solve', 'simulate', 'sweep', 'case-study', 'check')
ALL_MODELS = 'all'
MULTI_MODEL_MODES = ('solve', 'simulate', 'sweep')

SCHEMA = {
    'mode': None,
    'model': None,
    'params': ('p_c', 'beta', 'alpha', 's', 'c_serve', 'c_lose', 'k', 'psi'),
    'grid': ('delta', 'b_max'),
    'sim': ('n_agents', 'n_steps', 'policy_refresh_period', 'belief_window', 'belief_step', 'initial_belief'),
    'solver': ('z0', 'damping', 'tol', 'max_iters'),
    'sweep': ('k_values', 'psi', 'mode'),
    'case_study': ('trace', 'mode'),
    'output_dir': None,
    'seed': None,
    'workers': None,
}

FLAG_PATHS = {
    'model': ('model',),
    'k': ('params', 'k'),
    'psi': ('params', 'psi'),
    'alpha': ('params', 'alpha'),
    'delta': ('grid', 'delta'),
    'agents': ('sim', 'n_agents'),
    'steps': ('sim', 'n_steps'),
    'z0': ('solver', 'z0'),
    'sweep_k': ('sweep', 'k_values'),
    'sweep_psi': ('sweep', 'psi'),
    'sweep_mode': ('sweep', 'mode'),
    'trace': ('case_study', 'trace'),
    'case_mode': ('case_study', 'mode'),
    'seed': ('seed',),
    'out': ('output_dir',),
    'workers': ('workers',),
}


def default_settings(mode):
    """Full configuration dictionary holding the configured defaults"""
    if mode == 'case-study':
        params = case_study_params().to_dict()
        params.pop('p_s')
    else:
        params = {'p_c': Config.P_CLIENT, 'beta': Config.BETA, 'alpha': Config.ALPHA, 's': Config.SURPLUS,
                  'c_serve': Config.C_SERVE, 'c_lose': Config.C_LOSE, 'k': Config.PRICE_K, 'psi': Config.PSI}
    return {
        'mode': mode,
        'model': Config.LOAN_MODEL,
        'params': params,
        'grid': {'delta': Config.GRID_DELTA, 'b_max': Config.GRID_B_MAX},
        'sim': {'n_agents': Config.SIM_AGENTS, 'n_steps': Config.SIM_STEPS,
                'policy_refresh_period': Config.POLICY_REFRESH_PERIOD, 'belief_window': Config.BELIEF_WINDOW,
                'belief_step': Config.BELIEF_STEP, 'initial_belief': Config.MFE_Z0},
        'solver': {'z0': Config.MFE_Z0, 'damping': Config.MFE_DAMPING, 'tol': Config.MFE_TOL,
                   'max_iters': Config.MFE_MAX_ITERS},
        'sweep': {'k_values': Config.SWEEP_K_VALUES, 'psi': Config.SWEEP_PSI, 'mode': 'solve'},
        'case_study': {'trace': None, 'mode': 'solve'},
        'output_dir': Config.OUTPUT_DIR,
        'seed': Config.SIM_SEED,
        'workers': Config.WORKERS,
    }


def _check_schema(data):
    if not isinstance(data, dict):
        raise ValueError("Config file must hold a JSON object")
    for key, value in data.items():
        if key not in SCHEMA:
            raise ValueError(f"Unknown config field: {key}")
        fields = SCHEMA[key]
        if fields is None:
            continue
        if not isinstance(value, dict):
            raise ValueError(f"Config field {key} must be an object")
        for sub in value:
            if sub not in fields:
                raise ValueError(f"Unknown config field: {key}.{sub}")


def _merge(base, data):
    for key, value in data.items():
        if isinstance(value, dict) and isinstance(base.get(key), dict):
            base[key].update(value)
        else:
            base[key] = value
    return base


@dataclass
class RunConfig:
    mode: str
    params: MarketParams
    model: LoanModel
    grid: GridSpec
    sim: SimConfig
    k_values: list = field(default_factory=list)
    psi_options: list = field(default_factory=list)
    sweep_mode: str = 'solve'
    trace: str = None
    case_mode: str = 'solve'
    z0: float = Config.MFE_Z0
    damping: float = Config.MFE_DAMPING
    tol: float = Config.MFE_TOL
    max_iters: int = Config.MFE_MAX_ITERS
    output_dir: str = Config.OUTPUT_DIR
    seed: int = Config.SIM_SEED
    workers: int = Config.WORKERS
    models: tuple = ()

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {', '.join(MODES)}, got {self.mode!r}")
        if not self.models:
            self.models = (self.model,)
        if len(self.models) > 1 and self.mode not in MULTI_MODEL_MODES:
            raise ValueError(f"model 'all' works with {', '.join(MULTI_MODEL_MODES)}, not {self.mode}")
        if self.sweep_mode not in ('solve', 'simulate'):
            raise ValueError(f"sweep.mode must be solve or simulate, got {self.sweep_mode!r}")
        if self.case_mode not in ('solve', 'simulate', 'both'):
            raise ValueError(f"case_study.mode must be solve, simulate or both, got {self.case_mode!r}")
        if self.workers < 1:
            raise ValueError(f"workers must be at least 1, got {self.workers}")
        if not 0.0 <= self.z0 <= 1.0:
            raise ValueError(f"solver.z0 must lie in [0,1], got {self.z0}")

    @classmethod
    def from_dict(cls, data):
        data = copy.deepcopy(data)
        _check_schema(data)
        settings = _merge(default_settings(data.get('mode', 'solve')), data)
        p = dict(settings['params'])
        params = MarketParams.cluster_defaults(
            p_c=float(p['p_c']), beta=float(p['beta']), alpha=float(p['alpha']), s=float(p['s']),
            c_serve=float(p['c_serve']), c_lose=float(p['c_lose']), k=float(p['k']),
            psi=RegenerationDistribution.parse(p['psi']))
        if str(settings['model']).strip().lower() == ALL_MODELS:
            models = tuple(LoanModel)
        else:
            models = (LoanModel.parse(settings['model']),)
        model = LoanModel.BANK if len(models) > 1 else models[0]
        grid = GridSpec.for_params(params, delta=float(settings['grid']['delta']),
                                   b_max=float(settings['grid']['b_max']))
        s = settings['sim']
        sim = SimConfig(n_agents=int(s['n_agents']), n_steps=int(s['n_steps']), params=params, model=model,
                        seed=int(settings['seed']), policy_refresh_period=int(s['policy_refresh_period']),
                        belief_window=int(s['belief_window']), grid_delta=grid.delta,
                        belief_step=float(s['belief_step']), initial_belief=float(s['initial_belief']))
        k_values = settings['sweep']['k_values']
        k_values = parse_k_values(k_values) if isinstance(k_values, str) else [float(k) for k in k_values]
        psi = settings['sweep']['psi']
        psi_options = parse_psi_list(psi) if isinstance(psi, str) else [RegenerationDistribution.parse(x) for x in psi]
        solver = settings['solver']
        return cls(
            mode=settings['mode'], params=params, model=model, grid=grid, sim=sim,
            k_values=k_values, psi_options=[x.label for x in psi_options],
            sweep_mode=settings['sweep']['mode'], trace=settings['case_study']['trace'],
            case_mode=settings['case_study']['mode'], z0=float(solver['z0']), damping=float(solver['damping']),
            tol=float(solver['tol']), max_iters=int(solver['max_iters']),
            output_dir=str(settings['output_dir']), seed=int(settings['seed']), workers=int(settings['workers']),
            models=models,
        )

    @property
    def model_label(self):
        return ALL_MODELS if len(self.models) > 1 else self.model.value

    def to_dict(self):
        params = self.params.to_dict()
        params.pop('p_s')
        return {
            'mode': self.mode,
            'model': self.model_label,
            'params': params,
            'grid': {'delta': self.grid.delta, 'b_max': self.grid.b_max},
            'sim': {'n_agents': self.sim.n_agents, 'n_steps': self.sim.n_steps,
                    'policy_refresh_period': self.sim.policy_refresh_period,
                    'belief_window': self.sim.belief_window, 'belief_step': self.sim.belief_step,
                    'initial_belief': self.sim.initial_belief},
            'solver': {'z0': self.z0, 'damping': self.damping, 'tol': self.tol, 'max_iters': self.max_iters},
            'sweep': {'k_values': list(self.k_values), 'psi': list(self.psi_options), 'mode': self.sweep_mode},
            'case_study': {'trace': self.trace, 'mode': self.case_mode},
            'output_dir': self.output_dir,
            'seed': self.seed,
            'workers': self.workers,
        }


def parse_config(path=None, overrides=None):
    """Defaults < JSON file < flags"""
    data = {}
    if path:
        try:
            with open(path, 'r', encoding='utf-8') as f:
                text = f.read()
        except OSError as e:
            raise ValueError(f"Cannot read config file {path}: {e}")
        if text.strip():
            try:
                data = json.loads(text)
            except json.JSONDecodeError as e:
                raise ValueError(f"Config file {path} is not valid JSON: {e}")
        _check_schema(data)
    for flag, value in (overrides or {}).items():
        if value is None:
            continue
        if flag == 'mode':
            data['mode'] = value
            continue
        if flag not in FLAG_PATHS:
            raise ValueError(f"Unknown override: {flag}")
        target = data
        *parents, leaf = FLAG_PATHS[flag]
        for parent in parents:
            target = target.setdefault(parent, {})
        target[leaf] = value
    return RunConfig.from_dict(data)


def _suffix(config, model):
    return '' if len(config.models) == 1 else f"_{model.value.replace('-', '_')}"


def _comparison(config, rows):
    """model_comparison.csv when several models ran side by side"""
    if len(config.models) == 1:
        return []
    frame = pd.DataFrame(rows, columns=['model', 'psi', 'k', 'trade_ratio', 'expected_value', 'z_star'])
    return [reports.write_frame(frame, os.path.join(config.output_dir, 'model_comparison.csv'))]


def _run_solve(config):
    out = config.output_dir
    artifacts, cdfs, rows, summary = [], {}, [], {}
    for model in config.models:
        solver = MFESolver(config.params, model, config.grid)
        report = solver.solve(z0=config.z0, damping=config.damping, tol=config.tol, max_iters=config.max_iters)
        payload = report.to_dict()
        payload.update(params=config.params.to_dict(), model=model.value, grid=config.grid.to_dict())
        suffix = _suffix(config, model)
        artifacts += [
            reports.write_json(os.path.join(out, f"report{suffix}.json"), payload),
            reports.write_frame(report.value.to_frame(), os.path.join(out, f"value{suffix}.csv")),
            reports.write_frame(report.pi.to_frame(), os.path.join(out, f"pi{suffix}.csv")),
            reports.write_frame(_policy_frame(report.policy), os.path.join(out, f"policy{suffix}.csv")),
        ]
        cdfs[model] = report.pi
        rows.append((model.value, config.params.psi.label, config.params.k, report.trade_ratio,
                     report.expected_value, report.z_star))
        summary[model.value] = {'z_star': report.z_star, 'trade_ratio': report.trade_ratio,
                                'expected_value': report.expected_value, 'converged': report.converged}
    artifacts.append(reports.emit_plot_data(cdfs, 'budget_cdf', out))
    artifacts += _comparison(config, rows)
    return artifacts, summary[config.model.value] if len(config.models) == 1 else summary


def _policy_frame(policy):
    edges = [0.0] + list(policy.switch_points) + [float('inf')]
    return pd.DataFrame({'start': edges[:-1], 'end': edges[1:], 'action': list(policy.actions)})


def _run_simulate(config):
    out = config.output_dir
    artifacts, beliefs, budgets, bids, rows, summary = [], {}, {}, {}, [], {}
    for model in config.models:
        result = MarketSimulator(replace(config.sim, model=model)).run()
        tail = result.tail()
        zeros = sum(m.bid_zero for m in tail)
        matches = sum(m.matches for m in tail)
        suffix = _suffix(config, model)
        artifacts += [
            reports.write_frame(result.to_frame(), os.path.join(out, f"metrics{suffix}.csv")),
            reports.write_json(os.path.join(out, f"summary{suffix}.json"), result.summary()),
        ]
        beliefs[model] = [b[0] for b in result.beliefs]
        budgets[model] = result.budgets
        bids[model] = (zeros, matches - zeros)
        rows.append((model.value, config.params.psi.label, config.params.k, result.terminal_trade_ratio(),
                     float('nan'), result.terminal_z()))
        summary[model.value] = result.summary()
    artifacts += [
        reports.emit_plot_data(beliefs, 'belief_convergence', out),
        reports.emit_plot_data(budgets, 'budget_cdf', out),
        reports.emit_plot_data(bids, 'bid_hist', out, k=config.params.k),
    ]
    artifacts += _comparison(config, rows)
    return artifacts, summary[config.model.value] if len(config.models) == 1 else summary


def _run_sweep(config, run_id=None):
    tables = [sweep(config.k_values, config.psi_options, replace(config.sim, model=model),
                    mode=config.sweep_mode, workers=config.workers) for model in config.models]
    table = pd.concat(tables, ignore_index=True)
    table['cell'] = np.arange(len(table))
    artifacts = [reports.emit_plot_data(table, 'sweep', config.output_dir)]
    if run_id is not None:
        _record_cells(run_id, table)
    summary = {'cells': len(table), 'failed': int((table['status'] == 'failed').sum())}
    return artifacts, summary


def _run_case_study(config):
    result = run_case_study(trace=config.trace, params=config.params, model=config.model, mode=config.case_mode,
                            n_agents=config.sim.n_agents, n_steps=config.sim.n_steps, seed=config.seed,
                            grid_delta=config.grid.delta)
    out = config.output_dir
    artifacts = [
        reports.write_json(os.path.join(out, 'case_study.json'), result.to_dict()),
        reports.write_json(os.path.join(out, 'savings.json'), result.savings.to_dict()),
    ]
    text_path = os.path.join(out, 'savings.txt')
    with open(text_path, 'w', encoding='utf-8') as f:
        f.write(result.savings.to_text())
    artifacts.append(text_path)
    if result.simulation is not None:
        beliefs = {'region_a': [b[0] for b in result.simulation.beliefs],
                   'region_b': [b[1] for b in result.simulation.beliefs]}
        artifacts.append(reports.emit_plot_data(beliefs, 'belief_convergence', out, name='case_study'))
        artifacts.append(reports.write_frame(result.simulation.to_frame(), os.path.join(out, 'metrics.csv')))
    if result.coupled is not None:
        cdfs = {p.label: r.pi for p, r in zip(result.coupled.profiles, result.coupled.reports)}
        artifacts.append(reports.emit_plot_data(cdfs, 'budget_cdf', out, name='case_study'))
        artifacts.append(reports.write_frame(result.value_frame(), os.path.join(out, 'value_by_type.csv')))
    summary = {'trade_ratio': result.trade_ratio, 'market_savings': result.savings.market_savings}
    return artifacts, summary


def _run_check(config):
    results = run_checks(config.params, config.model, grid=config.grid)
    artifacts = [reports.write_json(os.path.join(config.output_dir, 'checks.json'), results)]
    return artifacts, {'passed': results['passed']}


def _record_start(config, digest):
    try:
        db = get_db_session()
        session = RunSession(mode=config.mode, model=config.model_label, config_hash=digest, seed=config.seed,
                             output_dir=config.output_dir, started_at=datetime.utcnow(), status='running')
        db.add(session)
        db.commit()
        run_id = session.id
        db.close()
        return run_id
    except Exception as e:
        logger.warning(f"Run registry unavailable: {str(e)}")
        return None


def _record_finish(run_id, status, artifacts=(), summary=None, errors=()):
    if run_id is None:
        return
    try:
        db = get_db_session()
        session = db.get(RunSession, run_id)
        session.status = status
        session.artifacts = json.dumps(sorted(os.path.basename(a) for a in artifacts))
        session.summary = json.dumps(summary or {}, default=float)
        session.errors = json.dumps(list(errors))
        session.completed_at = datetime.utcnow()
        db.commit()
        db.close()
    except Exception as e:
        logger.warning(f"Could not update run {run_id} in the registry: {str(e)}")


def _record_cells(run_id, table):
    try:
        db = get_db_session()
        for row in table.to_dict('records'):
            db.add(SweepCell(run_id=run_id, cell_index=int(row['cell']), k=float(row['k']), psi=row['psi'],
                             trade_ratio=None if np.isnan(row['trade_ratio']) else float(row['trade_ratio']),
                             expected_value=None if np.isnan(row['expected_value']) else float(row['expected_value']),
                             status=row['status'], error=row['error'] or None))
        db.commit()
        db.close()
    except Exception as e:
        logger.warning(f"Could not record sweep cells: {str(e)}")


def write_error(out_dir, mode, error):
    payload = {'status': 'error', 'mode': mode, 'error_type': type(error).__name__, 'message': str(error)}
    return reports.write_json(os.path.join(out_dir, 'error.json'), payload)


def dispatch(config):
    """Run one command; returns the process exit status"""
    os.makedirs(config.output_dir, exist_ok=True)
    settings = config.to_dict()
    digest = reports.config_hash(settings)
    run_id = _record_start(config, digest)
    logger.info(f"Run {config.mode} started (config {digest[:12]}, seed {config.seed})")
    try:
        if config.mode == 'solve':
            artifacts, summary = _run_solve(config)
        elif config.mode == 'simulate':
            artifacts, summary = _run_simulate(config)
        elif config.mode == 'sweep':
            artifacts, summary = _run_sweep(config, run_id)
        elif config.mode == 'case-study':
            artifacts, summary = _run_case_study(config)
        else:
            artifacts, summary = _run_check(config)
        artifacts.append(reports.write_manifest(config.output_dir, settings, config.seed, artifacts))
    except Exception as e:
        logger.error(f"Run {config.mode} failed: {str(e)}")
        write_error(config.output_dir, config.mode, e)
        _record_finish(run_id, 'failed', errors=[f"{type(e).__name__}: {e}"])
        return 1
    _record_finish(run_id, 'completed', artifacts, summary)
    logger.info(f"Run {config.mode} completed: {len(artifacts)} artifacts in {config.output_dir}")
    if config.mode == 'check' and not summary['passed']:
        return 1
    return 0


def setup_logging(verbose=False):
    level = logging.DEBUG if verbose else getattr(logging, Config.LOG_LEVEL)
    logging.basicConfig(
        level=level,
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        handlers=[
            logging.FileHandler(Config.LOG_FILE),
            logging.StreamHandler()
        ],
        force=True
    )


def _execute(mode, config_path, verbose, **flags):
    setup_logging(verbose)
    try:
        config = parse_config(config_path, {'mode': mode, **flags})
    except Exception as e:
        logger.error(f"Invalid configuration: {str(e)}")
        out_dir = flags.get('out') or Config.OUTPUT_DIR
        os.makedirs(out_dir, exist_ok=True)
        write_error(out_dir, mode, e)
        click.echo(f"Error: {e}", err=True)
        sys.exit(1)
    status = dispatch(config)
    click.echo(f"{mode}: {'ok' if status == 0 else 'failed'} -> {config.output_dir}")
    sys.exit(status)


def common_options(func):
    options = [
        click.option('--config', 'config_path', type=click.Path(), default=None, help='JSON config file'),
        click.option('--model', type=click.Choice(['hard', 'bank', 'peer-loan', ALL_MODELS]), default=None,
                     help='Financing model; all runs every model (solve, simulate, sweep)'),
        click.option('--alpha', type=float, default=None, help='Overdraft repayment factor'),
        click.option('--seed', type=int, default=None, help='Master seed'),
        click.option('--out', type=click.Path(), default=None, help='Output directory'),
        click.option('--workers', type=int, default=None, help='Worker count'),
        click.option('--verbose', '-v', is_flag=True, help='Verbose output'),
    ]
    for option in reversed(options):
        func = option(func)
    return func


@click.group()
def cli():
    """Mean field equilibrium solver and Monte Carlo simulator for sharing markets"""


@cli.command()
@common_options
@click.option('--k', type=float, default=None, help='Unified price')
@click.option('--psi', default=None, help="Regeneration distribution, e.g. 'U[0,5]'")
@click.option('--delta', type=float, default=None, help='Budget grid step')
@click.option('--z0', type=float, default=None, help='Starting belief')
def solve(config_path, verbose, **flags):
    """Solve the mean field equilibrium by dynamic programming"""
    _execute('solve', config_path, verbose, **flags)


@cli.command()
@common_options
@click.option('--k', type=float, default=None, help='Unified price')
@click.option('--psi', default=None, help="Regeneration distribution, e.g. 'U[0,5]'")
@click.option('--agents', type=int, default=None, help='Population size')
@click.option('--steps', type=int, default=None, help='Number of steps')
def simulate(config_path, verbose, **flags):
    """Run the Monte Carlo market simulation"""
    _execute('simulate', config_path, verbose, **flags)


@cli.command(name='sweep')
@common_options
@click.option('--k', 'sweep_k', default=None, help="Prices as start:step:stop or a comma list")
@click.option('--psi', 'sweep_psi', default=None, help="Comma-separated regeneration distributions")
@click.option('--mode', 'sweep_mode', type=click.Choice(['solve', 'simulate']), default=None)
@click.option('--agents', type=int, default=None, help='Population size (simulate mode)')
@click.option('--steps', type=int, default=None, help='Number of steps (simulate mode)')
def sweep_command(config_path, verbose, **flags):
    """Trade ratio and expected value over a grid of prices and regeneration distributions"""
    _execute('sweep', config_path, verbose, **flags)


@cli.command(name='case-study')
@common_options
@click.option('--trace', type=click.Path(exists=True), default=None, help='Weather trace CSV')
@click.option('--mode', 'case_mode', type=click.Choice(['solve', 'simulate', 'both']), default=None)
@click.option('--agents', type=int, default=None, help='Population size (simulate mode)')
@click.option('--steps', type=int, default=None, help='Number of steps (simulate mode)')
def case_study(config_path, verbose, **flags):
    """Two-region photovoltaic market and its savings against net metering"""
    _execute('case-study', config_path, verbose, **flags)


@cli.command()
@common_options
@click.option('--k', type=float, default=None, help='Unified price')
@click.option('--psi', default=None, help="Regeneration distribution, e.g. 'U[0,5]'")
def check(config_path, verbose, **flags):
    """Numerical checks of the equilibrium structure"""
    _execute('check', config_path, verbose, **flags)


if __name__ == '__main__':
    cli()
