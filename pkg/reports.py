"""CSV and JSON artifacts consumed by external plotters.

File names are fixed per kind and rows are written in a stable order, so two
runs with the same configuration produce identical files.
"""
import os
import sys
import json
import hashlib
import logging
import platform
from importlib import metadata

import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)

PLOT_KINDS = ('belief_convergence', 'budget_cdf', 'bid_hist', 'sweep')
FLOAT_FORMAT = '%.10g'
_SHORT_LABELS = {'hard': 'hard', 'bank': 'bank', 'peer-loan': 'loan'}


def _label(key):
    key = getattr(key, 'value', key)
    return _SHORT_LABELS.get(str(key), str(key).replace('-', '_'))


def _json_default(value):
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    if isinstance(value, np.ndarray):
        return value.tolist()
    if hasattr(value, 'to_dict'):
        return value.to_dict()
    raise TypeError(f"Cannot serialize {type(value).__name__}")


def write_json(path, data):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(data, f, indent=2, sort_keys=True, default=_json_default)
    logger.info(f"Wrote {path}")
    return path


def write_frame(frame, path):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT)
    logger.info(f"Wrote {len(frame)} rows to {path}")
    return path


def config_hash(config_dict):
    canonical = json.dumps(config_dict, sort_keys=True, default=_json_default)
    return hashlib.sha256(canonical.encode('utf-8')).hexdigest()


def package_versions():
    versions = {'python': sys.version.split()[0], 'platform': platform.platform()}
    for name in ('numpy', 'scipy', 'pandas', 'click', 'SQLAlchemy'):
        try:
            versions[name] = metadata.version(name)
        except metadata.PackageNotFoundError:
            versions[name] = None
    return versions


def write_manifest(out_dir, config_dict, seed, artifacts):
    """Everything needed to reproduce the run's outputs"""
    manifest = {
        'config': config_dict,
        'config_hash': config_hash(config_dict),
        'seed': seed,
        'versions': package_versions(),
        'artifacts': sorted(os.path.basename(a) for a in artifacts),
    }
    return write_json(os.path.join(out_dir, 'manifest.json'), manifest)


def belief_frame(series):
    """{model: z per step} -> step, z_hard, z_bank, z_loan"""
    columns = {f"z_{_label(key)}": list(values) for key, values in series.items()}
    length = max(len(v) for v in columns.values())
    frame = pd.DataFrame({'step': np.arange(1, length + 1)})
    for name, values in columns.items():
        frame[name] = pd.Series(values + [np.nan] * (length - len(values)), dtype=float)
    return frame


def budget_cdf_frame(series, points=None):
    """{model: budgets or StationaryDistribution} -> budget, cdf_<model> on a shared grid"""
    samples = {}
    for key, value in series.items():
        if hasattr(value, 'mass'):
            samples[key] = (value.grid.points, value.mass)
        else:
            budgets = np.sort(np.asarray(value, dtype=float))
            samples[key] = (budgets, None)
    if points is None:
        top = max(float(np.max(pts)) for pts, _ in samples.values())
        points = np.round(np.linspace(0.0, top, 201), 10)
    frame = pd.DataFrame({'budget': points})
    for key, (pts, mass) in samples.items():
        if mass is None:
            cdf = np.searchsorted(pts, points, side='right') / len(pts)
        else:
            cdf = np.cumsum(mass)[np.clip(np.searchsorted(pts, points, side='right') - 1, 0, len(pts) - 1)]
        frame[f"cdf_{_label(key)}"] = cdf
    return frame


def bid_hist_frame(series, k):
    """{model: (bid-0 count, bid-k count)} -> bid, count_<model>"""
    frame = pd.DataFrame({'bid': [0.0, float(k)]})
    for key, counts in series.items():
        frame[f"count_{_label(key)}"] = [int(counts[0]), int(counts[1])]
    return frame


def emit_plot_data(series, kind, out_dir, k=None, name=None):
    """Write one plot table; returns the file path"""
    if kind not in PLOT_KINDS:
        raise ValueError(f"Unknown plot kind {kind!r}; expected one of {', '.join(PLOT_KINDS)}")
    if series is None or len(series) == 0:
        raise ValueError(f"Cannot emit {kind}: the series is empty")
    if kind == 'belief_convergence':
        frame = belief_frame(series)
    elif kind == 'budget_cdf':
        frame = budget_cdf_frame(series)
    elif kind == 'bid_hist':
        if k is None:
            raise ValueError("bid_hist needs the price k")
        frame = bid_hist_frame(series, k)
    else:
        frame = series if isinstance(series, pd.DataFrame) else pd.DataFrame(series)
        if 'cell' in frame.columns:
            frame = frame.sort_values('cell').reset_index(drop=True)
    filename = f"{kind}.csv" if name is None else f"{kind}_{name}.csv"
    return write_frame(frame, os.path.join(out_dir, filename))
