import argparse
from pathlib import Path

import pandas as pd

from ivbench.enums import DensitySource
from ivbench.npsem import toy_policy, toy_spec
from ivbench.replication import replicate_table1
from ivbench.utils import stamp, write_json


# Reference replication means on the additive toy model, B = 1000
REFERENCE = pd.DataFrame({
    'n': [100, 500, 1000, 2000, 10_000],
    'psi_tmle': [1.010, 1.018, 1.019, 1.019, 1.020],
    'psi_plugin': [0.803, 0.798, 0.799, 0.798, 0.797],
    'sigma': [0.164, 0.075, 0.053, 0.038, 0.017],
    'coverage_0.05': [0.920, 0.949, 0.953, 0.960, 0.954],
})
TOLERANCE = {'psi_tmle': 0.02, 'psi_plugin': 0.02, 'sigma': 0.005, 'coverage_0.05': 0.03}


def compare_to_reference(table: pd.DataFrame) -> pd.DataFrame:
    '''Per-cell differences against REFERENCE for the sample sizes both tables share.'''
    merged = table.merge(REFERENCE, on='n', suffixes=('', '_ref'))
    rows = []
    for _, row in merged.iterrows():
        for column, tol in TOLERANCE.items():
            diff = row[column] - row[f'{column}_ref']
            rows.append({'n': int(row['n']), 'column': column, 'value': row[column], 'reference': row[f'{column}_ref'], 'diff': diff, 'ok': abs(diff) <= tol})
    return pd.DataFrame(rows)


def parse_args():
    parser = argparse.ArgumentParser(description='Replicate the TMLE simulation table on the toy model.')

    parser.add_argument('--n-list', type=int, nargs='+', default=list(REFERENCE['n']),
                        help='Sample sizes')
    parser.add_argument('-B', '--replications', type=int, default=1000,
                        help='Replications per sample size')
    parser.add_argument('--seed', type=int, default=0,
                        help='Master seed')
    parser.add_argument('--h-source', default=str(DensitySource.DESIGN), choices=[str(s) for s in DensitySource],
                        help='Instrument density used by the targeted estimator')
    parser.add_argument('-j', '--jobs', type=int, default=1,
                        help='joblib workers')
    parser.add_argument('-o', '--output-dir', type=Path, default=Path('output/table1'),
                        help='Directory for the table, the draws and the comparison')
    return parser.parse_args()


if __name__ == '__main__':
    args = parse_args()
    spec, policy = toy_spec(), toy_policy()
    print(f'Running {args.replications} replications for n in {args.n_list}...')
    report = replicate_table1(spec, policy, n_list=args.n_list, B=args.replications, seed=args.seed,
                              h_source=args.h_source, n_jobs=args.jobs)
    print(report.table.to_string(index=False))

    comparison = compare_to_reference(report.table)
    if len(comparison):
        print(comparison.to_string(index=False))
        print(f'{comparison["ok"].sum()}/{len(comparison)} cells within tolerance')

    args.output_dir.mkdir(parents=True, exist_ok=True)
    paths = report.write(args.output_dir)
    comparison.to_csv(args.output_dir / 'comparison.csv', index=False)
    summary = stamp(report.summary(), args.seed, {'n_list': args.n_list, 'B': args.replications, 'h_source': args.h_source})
    write_json(args.output_dir / 'report.json', summary)
    print(f'Saved {len(paths) + 2} files to {args.output_dir}')
