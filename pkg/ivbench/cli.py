'''
Command-line front end.

Usage:
    ivbench simulate --spec toy --n 1000 --seed 1 --out-dir runs/toy
    ivbench tmle --data runs/toy/data.csv --policy policy.csv --out-dir runs/toy
    ivbench replicate --B 1000 --jobs 4 --out-dir runs/table1
    ivbench kl-project --data runs/toy/data.csv --target target.csv --out-dir runs/kl
    ivbench kl-project --gaussian-world --n 500 --mu 1 --out-dir runs/em
    ivbench ls-project --B-matrix B.csv --g-star 0.4,0.6 --out-dir runs/ls

Every command also takes `--config FILE` (flat key = value file; flags win over it),
`--seed`, `--format csv|json` for tables and `--percent` to report probabilities as
percentages. Each run writes a JSON document carrying the seed, the config hash and the
package version.
'''

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

import numpy as np
import pandas as pd

from ivbench.config import RunConfig, load_spec
from ivbench.enums import Defaults, DensitySource, ExitCode, OutcomeKind, WorldTag
from ivbench.errors import ConvergenceError, IvbenchError, ParseError, ValidationError
from ivbench.estimators import gcomp_estimate, tmle_estimate
from ivbench.induced import build_B_matrices, induced_family_reduced
from ivbench.kl_projection import EmConfig, GaussianTreatmentWorld, TreatmentTarget, binary_kl, kl_project, monte_carlo_kl
from ivbench.ls_projection import PgdConfig, b_matrix_from_frame, ls_project, ls_project_strata, unconstrained_solution
from ivbench.npsem import (
    ObservedDataset,
    simulate_independent_policy,
    simulate_instrument_intervention,
    simulate_natural,
    toy_policy,
    toy_spec,
)
from ivbench.nuisance import fit_instrument_density, fit_outcome_regression, fit_treatment_kernel
from ivbench.replication import replicate_table1
from ivbench.tables import InducedMarginal, InstrumentPolicy
from ivbench.utils import read_numeric_csv, stamp, to_percent, write_json, write_table

NATURAL = 'natural'

COMMAND_DEFAULTS = {
    'simulate': {'spec': 'toy', 'n': 1000, 'world': NATURAL, 'policy': None, 'target': None},
    'tmle': {'data': None, 'policy': None, 'q_kind': str(OutcomeKind.OLS_MAIN_EFFECTS), 'alpha': 0.05, 'iterate': False},
    'replicate': {
        'spec': 'toy',
        'policy': None,
        'n_list': list(Defaults.N_LIST),
        'B': Defaults.REPLICATIONS,
        'q_kind': str(OutcomeKind.OLS_MAIN_EFFECTS),
        'h_source': str(DensitySource.DESIGN),
        'jobs': 1,
    },
    'kl-project': {
        'data': None,
        'target': None,
        'gaussian_world': False,
        'n': 500,
        'mu': 1.0,
        'sigma': Defaults.TARGET_SIGMA,
        'lam': None,
        'max_iter': Defaults.EM_MAX_ITER,
        'tol': Defaults.EM_TOL,
        'max_degree': 2,
    },
    'ls-project': {
        'B_matrix': None,
        'g_star': None,
        'h0': None,
        'weights': None,
        'data': None,
        'target': None,
        'step': Defaults.PGD_STEP,
        'tol': Defaults.PGD_TOL,
        'max_iter': Defaults.PGD_MAX_ITER,
        'jobs': 1,
    },
}


### Input helpers

def _float_list(value, key: str) -> list[float] | None:
    if value is None:
        return None
    if isinstance(value, str):
        value = value.split(',')
    try:
        return [float(v) for v in np.ravel(value)]
    except (TypeError, ValueError):
        raise ParseError(f'Expected a comma-separated list of numbers, got {value!r}', location=key) from None


def _int_list(value, key: str) -> list[int]:
    values = _float_list(value, key)
    if any(v != int(v) for v in values):
        raise ParseError(f'Expected integers, got {values}', location=key)
    return [int(v) for v in values]


def _required(params: dict, key: str):
    if params.get(key) is None:
        raise ValidationError(f'Missing required option --{key.replace("_", "-")}')
    return params[key]


def _outcome_kind(value) -> OutcomeKind:
    try:
        return OutcomeKind(value)
    except ValueError:
        raise ParseError(f'Unknown q_kind {value!r}; expected one of {[str(k) for k in OutcomeKind]}', location='q_kind') from None


def _density_source(value) -> DensitySource:
    try:
        return DensitySource(value)
    except ValueError:
        raise ParseError(f'Unknown h_source {value!r}; expected one of {[str(s) for s in DensitySource]}', location='h_source') from None


def read_dataset(path) -> ObservedDataset:
    return ObservedDataset.from_frame(read_numeric_csv(path, required=('z', 'a', 'y')))


def read_policy(path) -> InstrumentPolicy:
    return InstrumentPolicy.from_frame(read_numeric_csv(path, required=('z', 'probability')))


def read_target(path) -> InducedMarginal:
    return InducedMarginal.from_frame(read_numeric_csv(path, required=('p1',)))


def _suffix(cfg: RunConfig) -> str:
    return '.csv' if cfg.fmt == 'csv' else '.json'


def _records(frame: pd.DataFrame) -> list[dict]:
    return frame.to_dict(orient='records')


def _save(cfg: RunConfig, name: str, payload: dict) -> Path:
    path = cfg.out_dir / name
    write_json(path, stamp(payload, cfg.seed, cfg.as_dict()))
    print(f'Saved results at {path}')
    return path


### Commands

def cmd_simulate(cfg: RunConfig) -> int:
    p = cfg.params
    spec = load_spec(p['spec'])
    n = int(p['n'])
    world = p['world']
    print(f'Simulating {n} rows from the {world} world...')
    if world == NATURAL:
        frame = simulate_natural(spec, n, cfg.seed).to_frame()
    elif world == WorldTag.INSTRUMENT_INTERVENTION:
        frame = simulate_instrument_intervention(spec, read_policy(_required(p, 'policy')), n, cfg.seed).to_frame()
    elif world == WorldTag.INDEPENDENT_POLICY:
        frame = simulate_independent_policy(spec, read_target(_required(p, 'target')), n, cfg.seed).to_frame()
    else:
        raise ParseError(f'Unknown world {world!r}', location='world')

    path = cfg.out_dir / f'data{_suffix(cfg)}'
    write_table(frame, path, cfg.fmt)
    print(f'Saved dataset at {path}')
    _save(cfg, 'data.meta.json', {'command': 'simulate', 'world': world, 'n': n, 'files': [path.name], 'spec': spec.describe()})
    return ExitCode.OK


def cmd_tmle(cfg: RunConfig) -> int:
    p = cfg.params
    data = read_dataset(_required(p, 'data'))
    policy = read_policy(_required(p, 'policy'))
    q_kind = _outcome_kind(p['q_kind'])

    print('Fitting nuisance components...')
    q_init = fit_outcome_regression(data, q_kind, seed=cfg.seed)
    h_nat = fit_instrument_density(data)
    plugin = gcomp_estimate(data, q_init, policy)
    estimate = tmle_estimate(data, q_init, h_nat, policy, alpha=float(p['alpha']), iterate=bool(p['iterate']))

    # Identification uses only the covariates the policy reads
    columns = policy.columns if policy.columns is not None else tuple(range(data.d))
    family = induced_family_reduced(data, policy, [columns])
    marginal = family.members[0].marginal

    payload = {
        'command': 'tmle',
        **estimate.to_dict(),
        'psi_plugin': plugin,
        'q_kind': str(q_kind),
        'identification_covariates': [f'w{j + 1}' for j in columns],
        'policy': _records(policy.to_frame(cfg.percent)),
        'induced_marginal': _records(marginal.to_frame(cfg.percent)),
    }
    print(f'psi = {estimate.psi:.4f} (se {estimate.se:.4f}), plug-in {plugin:.4f}')
    _save(cfg, 'tmle.json', payload)
    return ExitCode.OK


def cmd_replicate(cfg: RunConfig) -> int:
    p = cfg.params
    spec = load_spec(p['spec'])
    if p['policy'] is not None:
        policy = read_policy(p['policy'])
    elif spec.strata.same_as(toy_spec().strata):
        policy = toy_policy()
    else:
        raise ValidationError(f'--policy is required for spec {p["spec"]!r}')
    n_list = _int_list(p['n_list'], 'n_list')

    print(f'Running {int(p["B"])} replications at n = {n_list}...')
    report = replicate_table1(
        spec,
        policy,
        n_list=n_list,
        B=int(p['B']),
        seed=cfg.seed,
        q_kind=_outcome_kind(p['q_kind']),
        h_source=_density_source(p['h_source']),
        n_jobs=int(p['jobs']),
    )
    if cfg.percent:
        table = report.table.copy()
        for column in table.columns:
            if column.startswith('coverage_'):
                table[column] = to_percent(table[column], True)
        report = dataclasses.replace(report, table=table)
    paths = report.write(cfg.out_dir, cfg.fmt)
    print(report.table.to_string(index=False))
    _save(cfg, 'report.json', {'command': 'replicate', 'files': [path.name for path in paths], **report.summary()})
    return ExitCode.OK


def _policy_surface(policy: InstrumentPolicy, W, natural_p1=None) -> pd.DataFrame:
    frame = pd.DataFrame(W, columns=[f'w{j + 1}' for j in range(W.shape[1])])
    frame['h1'] = policy.p1(W)
    if natural_p1 is not None:
        frame['h1_natural'] = natural_p1
    return frame


def cmd_kl_project(cfg: RunConfig) -> int:
    p = cfg.params
    config = EmConfig(
        lam=None if p['lam'] is None else float(p['lam']),
        max_iter=int(p['max_iter']),
        tol=float(p['tol']),
        seed=cfg.seed,
        max_degree=int(p['max_degree']),
    )
    if p['gaussian_world']:
        world = GaussianTreatmentWorld()
        W = world.sample_covariates(int(p['n']), cfg.seed, stream=1)
        target = TreatmentTarget.gaussian(float(p['mu']), float(p['sigma']))
        kernel = world
        print('Running EM on the Gaussian-treatment world...')
        result = kl_project(target, kernel, W, config)
        p1 = result.policy.p1(W)
        natural = world.natural_p1(W)
        surface = _policy_surface(result.policy, W, natural)
        kl = {
            'kl_projected': monte_carlo_kl(target, kernel, p1, W, result.a_star),
            'kl_natural': monte_carlo_kl(target, kernel, natural, W, result.a_star),
        }
    else:
        data = read_dataset(_required(p, 'data'))
        marginal = read_target(_required(p, 'target'))
        kernel = fit_treatment_kernel(data)
        target = TreatmentTarget.binary(marginal)
        print('Running EM on the observed covariates...')
        result = kl_project(target, kernel, data.w, config)
        strata = data.strata()
        surface = _policy_surface(result.policy, strata.values)
        surface['h1'] = to_percent(surface['h1'], cfg.percent)
        kl = {'kl_projected': binary_kl(result.implied['p1_target'], result.implied['p1_implied'])}

    state = result.state
    suffix = _suffix(cfg)
    files = {'policy': f'kl_policy{suffix}', 'trace': f'kl_trace{suffix}', 'implied': f'kl_implied{suffix}'}
    write_table(surface, cfg.out_dir / files['policy'], cfg.fmt)
    write_table(state.trace_frame(), cfg.out_dir / files['trace'], cfg.fmt)
    write_table(result.implied, cfg.out_dir / files['implied'], cfg.fmt)
    payload = {
        'command': 'kl-project',
        'converged': state.converged,
        'iterations': state.iterations,
        'lambda': state.lam,
        'penalized_loglik': float(state.loglik_trace[-1]),
        **kl,
        'files': files,
    }
    _save(cfg, 'kl_result.json', payload)
    if not state.converged:
        print('EM did not converge')
        return ExitCode.NONCONVERGENCE
    return ExitCode.OK


def cmd_ls_project(cfg: RunConfig) -> int:
    p = cfg.params
    config = PgdConfig(float(p['step']), float(p['tol']), int(p['max_iter']))
    suffix = _suffix(cfg)
    files = {'policy': f'ls_policy{suffix}', 'trace': f'ls_trace{suffix}'}

    if p['B_matrix'] is not None:
        matrix, support = b_matrix_from_frame(read_numeric_csv(p['B_matrix'], required=('a',)))
        g_star = _float_list(_required(p, 'g_star'), 'g_star')
        state, implied = ls_project(
            matrix, g_star, _float_list(p['h0'], 'h0'), config.step, config.tol, config.max_iter, _float_list(p['weights'], 'weights')
        )
        try:
            unconstrained = unconstrained_solution(matrix, g_star).tolist()
        except ConvergenceError:
            unconstrained = None
        policy = InstrumentPolicy.tabular(None, support, state.h[None, :], columns=())
        write_table(policy.to_frame(cfg.percent), cfg.out_dir / files['policy'], cfg.fmt)
        write_table(state.trace_frame(), cfg.out_dir / files['trace'], cfg.fmt)
        converged = state.converged
        payload = {
            'command': 'ls-project',
            'h': state.h.tolist(),
            'implied': to_percent(implied, cfg.percent).tolist(),
            'risk': state.risk,
            'iterations': state.iterations,
            'step': state.step,
            'unconstrained_solution': unconstrained,
        }
    else:
        data = read_dataset(_required(p, 'data'))
        marginal = read_target(_required(p, 'target'))
        joint = data.joint()
        g_stars = marginal.table[marginal.rows_for(joint.strata.values)]
        result = ls_project_strata(build_B_matrices(joint), g_stars, joint.support, joint.strata, config=config, n_jobs=int(p['jobs']))
        traces = pd.concat(
            [state.trace_frame().assign(stratum=joint.strata.label(i)) for i, state in enumerate(result.states)],
            ignore_index=True,
        )
        files['implied'] = f'ls_implied{suffix}'
        write_table(result.policy.to_frame(cfg.percent), cfg.out_dir / files['policy'], cfg.fmt)
        write_table(traces, cfg.out_dir / files['trace'], cfg.fmt)
        write_table(result.implied.to_frame(cfg.percent), cfg.out_dir / files['implied'], cfg.fmt)
        converged = result.converged
        payload = {
            'command': 'ls-project',
            'strata': [joint.strata.label(i) for i in range(joint.strata.k)],
            'risk': [state.risk for state in result.states],
            'iterations': [state.iterations for state in result.states],
        }

    payload.update({'converged': converged, 'files': files})
    _save(cfg, 'ls_result.json', payload)
    if not converged:
        print('Projected gradient descent did not converge')
        return ExitCode.NONCONVERGENCE
    return ExitCode.OK


COMMANDS = {
    'simulate': cmd_simulate,
    'tmle': cmd_tmle,
    'replicate': cmd_replicate,
    'kl-project': cmd_kl_project,
    'ls-project': cmd_ls_project,
}


### Parser

def _common(parser: argparse.ArgumentParser):
    parser.add_argument('--config', type=Path, default=None, help='Flat key = value config file')
    parser.add_argument('--seed', type=int, default=None)
    parser.add_argument('--out-dir', dest='out_dir', default=None)
    parser.add_argument('--format', choices=['csv', 'json'], default=None, help='Table output format')
    parser.add_argument('--percent', action='store_true', default=None, help='Report probabilities as percentages')


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='ivbench', description='Implied interventions for instrumental-variable designs.')
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('simulate', help='Simulate a dataset from a structural model')
    p.add_argument('--spec', help='Built-in spec name or spec file (default: toy)')
    p.add_argument('--n', type=int)
    p.add_argument('--world', choices=[NATURAL, str(WorldTag.INSTRUMENT_INTERVENTION), str(WorldTag.INDEPENDENT_POLICY)])
    p.add_argument('--policy', help='Policy CSV for the instrument-intervention world')
    p.add_argument('--target', help='Target CSV for the independent-policy world')

    p = sub.add_parser('tmle', help='Targeted estimate of the mean outcome under an instrument policy')
    p.add_argument('--data', help='Dataset CSV (w1..wd, z, a, y)')
    p.add_argument('--policy', help='Policy CSV (covariate columns, z, probability)')
    p.add_argument('--q-kind', dest='q_kind', choices=[str(k) for k in OutcomeKind])
    p.add_argument('--alpha', type=float)
    p.add_argument('--iterate', action='store_true', default=None)

    p = sub.add_parser('replicate', help='Monte Carlo replication of the plug-in and targeted estimators')
    p.add_argument('--spec')
    p.add_argument('--policy')
    p.add_argument('--n-list', dest='n_list', help='Comma-separated sample sizes')
    p.add_argument('--B', dest='B', type=int, help='Replications per sample size')
    p.add_argument('--q-kind', dest='q_kind', choices=[str(k) for k in OutcomeKind])
    p.add_argument('--h-source', dest='h_source', choices=[str(s) for s in DensitySource],
                   help='Instrument density in the targeted estimator (design or fitted)')
    p.add_argument('--jobs', type=int)

    p = sub.add_parser('kl-project', help='EM projection of a target treatment distribution')
    p.add_argument('--data')
    p.add_argument('--target', help='Target CSV (covariate columns, p1)')
    p.add_argument('--gaussian-world', dest='gaussian_world', action='store_true', default=None)
    p.add_argument('--n', type=int)
    p.add_argument('--mu', type=float)
    p.add_argument('--sigma', type=float)
    p.add_argument('--lam', type=float)
    p.add_argument('--max-iter', dest='max_iter', type=int)
    p.add_argument('--tol', type=float)
    p.add_argument('--max-degree', dest='max_degree', type=int)

    p = sub.add_parser('ls-project', help='Least-squares projection onto the reachable treatment distributions')
    p.add_argument('--B-matrix', dest='B_matrix', help='B matrix CSV (a, then one column per instrument value)')
    p.add_argument('--g-star', dest='g_star', help='Comma-separated target pmf')
    p.add_argument('--h0', help='Comma-separated starting policy')
    p.add_argument('--weights', help='Comma-separated risk weights')
    p.add_argument('--data')
    p.add_argument('--target')
    p.add_argument('--step', type=float)
    p.add_argument('--tol', type=float)
    p.add_argument('--max-iter', dest='max_iter', type=int)
    p.add_argument('--jobs', type=int)

    for p in sub.choices.values():
        _common(p)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    flags = {k: v for k, v in vars(args).items() if k not in ('command', 'config')}
    try:
        cfg = RunConfig.resolve(args.command, COMMAND_DEFAULTS[args.command], flags, args.config)
        return int(COMMANDS[args.command](cfg))
    except IvbenchError as e:
        print(f'error: {e}', file=sys.stderr)
        return int(e.exit_code)


if __name__ == '__main__':
    sys.exit(main())
