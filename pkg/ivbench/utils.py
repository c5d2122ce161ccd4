import json
import hashlib
from pathlib import Path
from importlib import metadata

import numpy as np
import pandas as pd
from scipy.special import expit, logit

from ivbench.errors import ParseError, ValidationError

__all__ = [
    'make_rng',
    'as_covariates',
    'readonly',
    'expit',
    'logit',
    'config_hash',
    'package_version',
    'stamp',
    'write_json',
    'read_numeric_csv',
    'write_table',
    'to_percent',
]


def make_rng(seed: int, stream: int = 0) -> np.random.Generator:
    '''
    Returns a counter-based generator keyed by (seed, stream).

    Different streams never overlap, so replication `b` always sees the same draws
    regardless of the order in which replications are executed.
    '''
    if seed < 0 or stream < 0:
        raise ValidationError(f'Seed and stream must be non-negative, got seed={seed}, stream={stream}')
    key = np.array([seed, stream], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def as_covariates(W) -> np.ndarray:
    '''
    Coerce covariates to a 2-D float array of shape (n, d). A 1-D input is one covariate.
    '''
    W = np.asarray(W, dtype=float)
    if W.ndim == 1:
        W = W.reshape(-1, 1)
    if W.ndim != 2:
        raise ValidationError(f'Covariates must be 1-D or 2-D, got shape {W.shape}')
    return W


def readonly(arr, dtype=float) -> np.ndarray:
    '''Copy of `arr` with writes disabled; frozen dataclasses store their arrays this way.'''
    arr = np.array(arr, dtype=dtype)
    arr.setflags(write=False)
    return arr


def _canonical(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, Path):
        return str(obj)
    if isinstance(obj, dict):
        return {str(k): _canonical(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_canonical(v) for v in obj]
    return obj


def config_hash(config: dict) -> str:
    '''
    SHA-256 (first 16 hex digits) of the canonical JSON encoding of a config mapping.
    '''
    encoded = json.dumps(_canonical(config), sort_keys=True, separators=(',', ':'))
    return hashlib.sha256(encoded.encode('utf-8')).hexdigest()[:16]


def package_version() -> str:
    try:
        return metadata.version('ivbench')
    except metadata.PackageNotFoundError:
        from ivbench import __version__
        return __version__


def stamp(payload: dict, seed: int | None, config: dict) -> dict:
    '''
    Returns a copy of `payload` with the reproducibility header every artifact carries.
    '''
    header = {
        'seed': seed,
        'config_hash': config_hash(config),
        'version': package_version(),
    }
    return {**header, **_canonical(payload)}


def write_json(path: Path, payload: dict):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w') as f:
        json.dump(_canonical(payload), f, indent=4, sort_keys=False)
        f.write('\n')


def read_numeric_csv(path: Path, required: tuple[str, ...] = ()) -> pd.DataFrame:
    '''
    Read a CSV whose cells must all be numbers.

    Arguments:
        path: CSV file with a header row.
        required: Column names that must be present.

    Raises ParseError naming the first offending cell as (line, column), where line
    counts the header as line 1.
    '''
    path = Path(path)
    if not path.is_file():
        raise ParseError('File not found', source=path)
    try:
        raw = pd.read_csv(path, dtype=str, keep_default_na=False, skipinitialspace=True)
    except (pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise ParseError(f'Malformed CSV: {e}', source=path) from e

    missing = [c for c in required if c not in raw.columns]
    if missing:
        raise ParseError(f'Missing column(s) {missing}', location='header', source=path)

    frame = pd.DataFrame(index=raw.index)
    for column in raw.columns:
        values = pd.to_numeric(raw[column].str.strip(), errors='coerce')
        bad = values.isna() | ~np.isfinite(values.to_numpy(dtype=float, na_value=np.nan))
        if bad.any():
            row = int(np.flatnonzero(bad.to_numpy())[0])
            cell = raw[column].iloc[row]
            raise ParseError(f'Non-numeric cell {cell!r}', location=(row + 2, column), source=path)
        frame[column] = values
    return frame


def write_table(frame: pd.DataFrame, path: Path, fmt: str = 'csv'):
    '''
    Write a table as CSV or as a JSON list of records. Floats are written with full precision.
    '''
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if fmt == 'csv':
        frame.to_csv(path, index=False, float_format='%.12g', lineterminator='\n')
    elif fmt == 'json':
        write_json(path, {'rows': frame.to_dict(orient='records')})
    else:
        raise ValidationError(f'Unsupported output format: {fmt}')


def to_percent(values, percent: bool):
    '''Scale probabilities to percentages for reporting when `percent` is set.'''
    if not percent:
        return values
    return np.round(np.asarray(values, dtype=float) * 100, 2)
