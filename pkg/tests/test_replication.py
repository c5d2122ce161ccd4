import json

import numpy as np
import pandas as pd
import pytest

from ivbench.errors import ValidationError
from ivbench.replication import replicate_table1


@pytest.fixture(scope='module')
def small_report():
    from ivbench.npsem import toy_policy, toy_spec
    return replicate_table1(toy_spec(), toy_policy(), n_list=(100, 500), B=10, seed=1, progress=False)


def test_table_layout(small_report):
    table = small_report.table
    assert list(table.columns) == ['n', 'psi_tmle', 'psi_plugin', 'sigma', 'coverage_0.1', 'coverage_0.05']
    assert table['n'].tolist() == [100, 500]
    assert small_report.truth == pytest.approx(1.02, abs=1e-12)
    assert table['coverage_0.1'].between(0, 1).all()
    # Smaller samples give wider intervals
    assert table['sigma'].iloc[0] > table['sigma'].iloc[1]


def test_draws(small_report):
    draws = small_report.draws
    assert len(draws) == 20
    assert draws.groupby('n')['replication'].apply(list).tolist() == [list(range(10))] * 2
    assert np.isfinite(draws['psi_tmle']).all()


def test_deterministic(toy, h_star):
    first = replicate_table1(toy, h_star, n_list=(200,), B=4, seed=5, progress=False)
    second = replicate_table1(toy, h_star, n_list=(200,), B=4, seed=5, progress=False)
    pd.testing.assert_frame_equal(first.draws, second.draws)


def test_workers_do_not_change_results(toy, h_star):
    serial = replicate_table1(toy, h_star, n_list=(200,), B=4, seed=5, progress=False)
    parallel = replicate_table1(toy, h_star, n_list=(200,), B=4, seed=5, n_jobs=2, progress=False)
    pd.testing.assert_frame_equal(serial.draws, parallel.draws)


def test_write(small_report, tmp_path):
    paths = small_report.write(tmp_path)
    assert [p.name for p in paths] == ['table.csv', 'draws_n100.csv', 'draws_n500.csv']
    assert len(pd.read_csv(paths[1])) == 10
    summary = small_report.summary()
    assert json.loads(json.dumps(summary))['replications'] == 10


@pytest.mark.parametrize('kwargs', [dict(B=0), dict(n_list=()), dict(n_list=(0,))])
def test_rejects(toy, h_star, kwargs):
    with pytest.raises(ValidationError):
        replicate_table1(toy, h_star, progress=False, **kwargs)


def test_single_replication(toy, h_star):
    report = replicate_table1(toy, h_star, n_list=(300,), B=1, seed=2, progress=False)
    row, draw = report.table.iloc[0], report.draws.iloc[0]
    assert row['psi_tmle'] == draw['psi_tmle']
    assert row['sigma'] == draw['se']
    assert row['coverage_0.1'] in (0.0, 1.0)
    assert row['coverage_0.05'] in (0.0, 1.0)


def test_sigma_scales_with_root_n(toy, h_star):
    table = replicate_table1(toy, h_star, n_list=(2000, 10_000), B=5, seed=3, progress=False).table
    expected = table['sigma'].iloc[0] * np.sqrt(2000 / 10_000)
    assert table['sigma'].iloc[1] == pytest.approx(expected, rel=0.15)


def test_design_density_sigma_at_n100(toy, h_star):
    design = replicate_table1(toy, h_star, n_list=(100,), B=1000, seed=0, progress=False)
    fitted = replicate_table1(toy, h_star, n_list=(100,), B=1000, seed=0, h_source='fitted', progress=False)
    assert design.summary()['h_source'] == 'design'
    assert fitted.summary()['h_source'] == 'fitted'
    assert design.table['sigma'].iloc[0] == pytest.approx(0.164, abs=0.005)
    # Frequencies re-estimated on 100 draws inflate the EIC variance
    assert fitted.table['sigma'].iloc[0] > design.table['sigma'].iloc[0]
    pd.testing.assert_series_equal(design.draws['psi_plugin'], fitted.draws['psi_plugin'])
