'''
Flat key-value configuration files and structural-model spec files.

Format, one entry per line:

    # comment
    n = 1000
    n_list = [100, 500]
    q_kind = ols_main_effects

Values are JSON literals; anything that is not valid JSON is kept as a bare string.
'''

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from ivbench.errors import ParseError
from ivbench.npsem import BUILTIN_SPECS, NpsemSpec
from ivbench.tables import Strata
from ivbench.utils import config_hash

SPEC_KEYS = (
    'covariate_strata',
    'covariate_pmf',
    'instrument_support',
    'instrument_policy',
    'treatment_kernel',
    'outcome_coeffs',
    'noise_sd',
    'outcome_mode',
)
REQUIRED_SPEC_KEYS = SPEC_KEYS[:6]


def parse_kv(text: str, allowed=None, source=None) -> dict:
    '''
    Parse key-value text into a dict.

    Arguments:
        text: File contents.
        allowed: Accepted keys (None accepts any key).
        source: Path reported in errors.

    Raises ParseError with the 1-based line number on malformed lines, duplicate keys and
    keys outside `allowed`.
    '''
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split('#', 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition('=')
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ParseError(f'Expected "key = value", got {raw.strip()!r}', location=f'line {lineno}', source=source)
        if not key.isidentifier():
            raise ParseError(f'Invalid key {key!r}', location=f'line {lineno}', source=source)
        if allowed is not None and key not in allowed:
            raise ParseError(f'Unknown key {key!r}', location=f'line {lineno}', source=source)
        if key in values:
            raise ParseError(f'Duplicate key {key!r}', location=f'line {lineno}', source=source)
        if not value:
            raise ParseError(f'Missing value for {key!r}', location=f'line {lineno}', source=source)
        try:
            values[key] = json.loads(value)
        except json.JSONDecodeError:
            values[key] = value
    return values


def read_kv(path: Path, allowed=None) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ParseError('File not found', source=path)
    return parse_kv(path.read_text(), allowed, source=path)


def spec_from_values(values: dict, source=None) -> NpsemSpec:
    missing = [k for k in REQUIRED_SPEC_KEYS if k not in values]
    if missing:
        raise ParseError(f'Spec is missing key(s) {missing}', source=source)
    coeffs = values['outcome_coeffs']
    if not (isinstance(coeffs, list) and len(coeffs) == 3 and isinstance(coeffs[1], list)):
        raise ParseError('outcome_coeffs must be [alpha, [gamma_1, ..., gamma_d], delta]', location='outcome_coeffs', source=source)
    return NpsemSpec(
        strata=Strata(values['covariate_strata']),
        covariate_pmf=values['covariate_pmf'],
        instrument_support=values['instrument_support'],
        instrument_policy=values['instrument_policy'],
        treatment_kernel=values['treatment_kernel'],
        alpha=coeffs[0],
        gamma=coeffs[1],
        delta=coeffs[2],
        noise_sd=values.get('noise_sd', 0.0),
        outcome_mode=values.get('outcome_mode', 'additive'),
    )


def load_spec(name_or_path: str | Path) -> NpsemSpec:
    '''A built-in spec by name (toy, toy_multiplicative, oregon_schema) or a spec file.'''
    if str(name_or_path) in BUILTIN_SPECS:
        return BUILTIN_SPECS[str(name_or_path)]()
    path = Path(name_or_path)
    return spec_from_values(read_kv(path, SPEC_KEYS), source=path)


def dump_spec(spec: NpsemSpec) -> str:
    '''Spec file text that load_spec reads back into an equivalent spec.'''
    values = spec.describe()
    return ''.join(f'{key} = {json.dumps(values[key])}\n' for key in SPEC_KEYS)


@dataclass(frozen=True)
class RunConfig:
    '''
    Parameters of one command invocation, merged from defaults, a config file and flags
    (flags win).
    '''

    command: str
    params: dict = field(default_factory=dict)
    seed: int = 0
    out_dir: Path = Path('.')
    fmt: str = 'csv'
    percent: bool = False

    @classmethod
    def resolve(cls, command: str, defaults: dict, flags: dict, config_path: Path | None = None) -> RunConfig:
        '''
        Arguments:
            command: Subcommand name.
            defaults: Every accepted key with its default value.
            flags: Values from the command line; None means not given.
            config_path: Optional key-value file; unknown keys raise ParseError.
        '''
        allowed = set(defaults) | {'seed', 'out_dir', 'format', 'percent'}
        from_file = read_kv(config_path, allowed) if config_path is not None else {}
        merged = {'seed': 0, 'out_dir': '.', 'format': 'csv', 'percent': False, **defaults, **from_file}
        merged.update({k: v for k, v in flags.items() if v is not None and k in allowed})
        if merged['format'] not in ('csv', 'json'):
            raise ParseError(f'Unsupported format {merged["format"]!r}', location='format')
        seed = merged.pop('seed')
        if not isinstance(seed, int) or seed < 0:
            raise ParseError(f'seed must be a non-negative integer, got {seed!r}', location='seed')
        return cls(
            command=command,
            params={k: v for k, v in merged.items() if k not in ('out_dir', 'format', 'percent')},
            seed=seed,
            out_dir=Path(merged['out_dir']),
            fmt=merged['format'],
            percent=bool(merged['percent']),
        )

    def as_dict(self) -> dict:
        return {
            'command': self.command,
            'params': {k: str(v) if isinstance(v, Path) else v for k, v in sorted(self.params.items())},
            'seed': self.seed,
            'format': self.fmt,
            'percent': self.percent,
        }

    @property
    def hash(self) -> str:
        return config_hash(self.as_dict())
