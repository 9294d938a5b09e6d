#!/usr/bin/env python3
"""
Configuration layering, dispatch, artifacts and the run registry
"""
import json
import os

import pandas as pd
import pytest
from click.testing import CliRunner

import db
from cli import RunConfig, parse_config, dispatch, cli
from market import LoanModel, MarketParams
from models import RunSession, SweepCell


@pytest.fixture
def registry(tmp_path):
    db.init_db(f"sqlite:///{tmp_path / 'runs.db'}")
    yield
    db.get_engine().dispose()


def test_defaults_match_the_cluster_market():
    config = parse_config()
    assert config.mode == 'solve'
    assert config.params == MarketParams.cluster_defaults()
    assert config.model is LoanModel.BANK
    assert config.grid.delta == 0.05
    assert config.k_values[0] == 6.0 and config.k_values[-1] == 8.25


def test_flags_override_the_file(tmp_path):
    path = tmp_path / 'config.json'
    path.write_text(json.dumps({'model': 'hard', 'params': {'k': 6.5}, 'grid': {'delta': 0.1}}))
    config = parse_config(str(path), {'mode': 'solve', 'k': 7.5, 'model': 'peer-loan'})
    assert config.params.k == 7.5
    assert config.model is LoanModel.PEER_LOAN
    assert config.grid.delta == 0.1


def test_invalid_alpha_is_rejected():
    with pytest.raises(ValueError, match="alpha"):
        parse_config(None, {'mode': 'solve', 'alpha': 0.5})


def test_unknown_field_is_named(tmp_path):
    path = tmp_path / 'config.json'
    path.write_text(json.dumps({'params': {'foo': 1}}))
    with pytest.raises(ValueError, match="Unknown config field: params.foo"):
        parse_config(str(path))
    path.write_text('{not json')
    with pytest.raises(ValueError, match="not valid JSON"):
        parse_config(str(path))


def test_config_round_trip():
    config = parse_config(None, {'mode': 'sweep', 'sweep_k': '6,7', 'sweep_psi': 'U[0,5],U[5,10]', 'seed': 3})
    data = config.to_dict()
    assert data['sweep']['psi'] == ['U[0,5]', 'U[5,10]']
    assert RunConfig.from_dict(data).to_dict() == data


def test_solve_writes_artifacts(tmp_path, registry):
    out = tmp_path / 'solve'
    config = parse_config(None, {'mode': 'solve', 'model': 'hard', 'delta': 0.5, 'out': str(out)})
    assert dispatch(config) == 0
    for name in ('report.json', 'value.csv', 'pi.csv', 'policy.csv', 'budget_cdf.csv', 'manifest.json'):
        assert (out / name).exists()
    report = json.loads((out / 'report.json').read_text())
    assert report['z_star'] == pytest.approx(1.0)
    manifest = json.loads((out / 'manifest.json').read_text())
    assert 'report.json' in manifest['artifacts']
    assert len(manifest['config_hash']) == 64

    session = db.get_db_session()
    runs = session.query(RunSession).all()
    assert [r.status for r in runs] == ['completed']
    assert runs[0].to_dict()['summary']['converged'] is True
    session.close()


def test_failed_run_writes_error_json(tmp_path, registry):
    """k below c_serve breaks the budget kernel; the run reports it and exits 1"""
    out = tmp_path / 'broken'
    config = parse_config(None, {'mode': 'solve', 'k': 3.0, 'delta': 0.5, 'out': str(out)})
    assert dispatch(config) == 1
    error = json.loads((out / 'error.json').read_text())
    assert error['error_type'] == 'ValueError'
    assert error['mode'] == 'solve'
    session = db.get_db_session()
    assert session.query(RunSession).one().status == 'failed'
    session.close()


def test_sweep_records_cells(tmp_path, registry):
    out = tmp_path / 'sweep'
    config = parse_config(None, {'mode': 'sweep', 'sweep_k': '6.5,7', 'sweep_psi': 'U[0,5]',
                                 'delta': 0.5, 'out': str(out)})
    assert dispatch(config) == 0
    assert (out / 'sweep.csv').exists()
    session = db.get_db_session()
    cells = session.query(SweepCell).order_by(SweepCell.cell_index).all()
    assert [c.k for c in cells] == [6.5, 7.0]
    assert all(c.status == 'completed' for c in cells)
    session.close()


def test_command_line_rejects_bad_alpha(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    out = tmp_path / 'out'
    result = CliRunner().invoke(cli, ['solve', '--alpha', '0.5', '--out', str(out)])
    assert result.exit_code == 1
    assert os.path.exists(out / 'error.json')


def test_all_models_solve_side_by_side(tmp_path, registry):
    out = tmp_path / 'all'
    config = parse_config(None, {'mode': 'solve', 'model': 'all', 'delta': 0.5, 'out': str(out)})
    assert config.models == (LoanModel.HARD, LoanModel.BANK, LoanModel.PEER_LOAN)
    assert config.to_dict()['model'] == 'all'
    assert RunConfig.from_dict(config.to_dict()).models == config.models
    assert dispatch(config) == 0
    for name in ('report_hard.json', 'report_bank.json', 'report_peer_loan.json', 'pi_bank.csv',
                 'budget_cdf.csv', 'model_comparison.csv'):
        assert (out / name).exists()
    cdf = pd.read_csv(out / 'budget_cdf.csv')
    assert list(cdf.columns) == ['budget', 'cdf_hard', 'cdf_bank', 'cdf_loan']
    comparison = pd.read_csv(out / 'model_comparison.csv')
    assert list(comparison['model']) == ['hard', 'bank', 'peer-loan']
    assert comparison.loc[0, 'trade_ratio'] == pytest.approx(0.0, abs=1e-4)
    assert comparison.loc[1, 'trade_ratio'] > 0.5
    session = db.get_db_session()
    assert session.query(RunSession).one().model == 'all'
    session.close()


def test_all_models_simulate_and_sweep(tmp_path, registry):
    out = tmp_path / 'sim'
    config = parse_config(None, {'mode': 'simulate', 'model': 'all', 'agents': 600, 'steps': 12,
                                 'delta': 0.5, 'out': str(out)})
    assert dispatch(config) == 0
    beliefs = pd.read_csv(out / 'belief_convergence.csv')
    assert list(beliefs.columns) == ['step', 'z_hard', 'z_bank', 'z_loan']
    assert len(beliefs) == 12
    hist = pd.read_csv(out / 'bid_hist.csv')
    assert list(hist.columns) == ['bid', 'count_hard', 'count_bank', 'count_loan']
    assert (out / 'metrics_peer_loan.csv').exists()

    out = tmp_path / 'sweep'
    config = parse_config(None, {'mode': 'sweep', 'model': 'all', 'sweep_k': '7', 'sweep_psi': 'U[0,5]',
                                 'delta': 0.5, 'out': str(out)})
    assert dispatch(config) == 0
    table = pd.read_csv(out / 'sweep.csv')
    assert list(table['model']) == ['hard', 'bank', 'peer-loan']
    assert list(table['cell']) == [0, 1, 2]
    with pytest.raises(ValueError, match="all"):
        parse_config(None, {'mode': 'check', 'model': 'all'})


def test_case_study_writes_value_by_type(tmp_path, registry):
    out = tmp_path / 'case'
    config = parse_config(None, {'mode': 'case-study', 'delta': 0.5, 'out': str(out)})
    assert dispatch(config) == 0
    frame = pd.read_csv(out / 'value_by_type.csv')
    assert {'budget', 'value_region_a', 'value_region_b'} <= set(frame.columns)
    assert 'value_by_type.csv' in json.loads((out / 'manifest.json').read_text())['artifacts']
