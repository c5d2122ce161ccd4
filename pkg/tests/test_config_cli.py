import json

import numpy as np
import pandas as pd
import pytest

from ivbench.cli import main
from ivbench.config import RunConfig, dump_spec, load_spec, parse_kv
from ivbench.enums import ExitCode
from ivbench.errors import ParseError, ValidationError
from ivbench.npsem import toy_policy, toy_spec
from ivbench.tables import InstrumentPolicy


class TestParseKv:

    def test_values(self):
        text = '# header\nn = 1000\nn_list = [100, 500]  # sizes\nq_kind = saturated\nflag = true\n\n'
        assert parse_kv(text) == {'n': 1000, 'n_list': [100, 500], 'q_kind': 'saturated', 'flag': True}

    @pytest.mark.parametrize('text, line', [
        ('n = 1\nnot a pair\n', 'line 2'),
        ('n = 1\nn = 2\n', 'line 2'),
        ('1n = 3\n', 'line 1'),
        ('n =\n', 'line 1'),
    ])
    def test_errors(self, text, line):
        with pytest.raises(ParseError) as e:
            parse_kv(text)
        assert e.value.location == line

    def test_unknown_key(self):
        with pytest.raises(ParseError, match='Unknown key'):
            parse_kv('m = 1\n', allowed={'n'})


class TestSpecFiles:

    def test_round_trip(self, tmp_path):
        path = tmp_path / 'toy.spec'
        path.write_text(dump_spec(toy_spec()))
        spec = load_spec(path)
        np.testing.assert_array_equal(spec.treatment_kernel, toy_spec().treatment_kernel)
        assert spec.describe() == toy_spec().describe()

    def test_builtin(self):
        assert load_spec('oregon_schema').strata.k == 24

    def test_row_sum(self, tmp_path):
        path = tmp_path / 'bad.spec'
        path.write_text(dump_spec(toy_spec()).replace('[[0.7, 0.3], [0.2, 0.8]]', '[[0.7, 0.3], [0.2, 0.7]]'))
        with pytest.raises(ValidationError, match='row'):
            load_spec(path)

    def test_missing_key(self, tmp_path):
        path = tmp_path / 'short.spec'
        path.write_text('covariate_pmf = [1.0]\n')
        with pytest.raises(ParseError, match='missing'):
            load_spec(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ParseError, match='not found'):
            load_spec(tmp_path / 'nope.spec')


class TestRunConfig:

    def test_flags_win(self, tmp_path):
        path = tmp_path / 'run.cfg'
        path.write_text('n = 50\nseed = 4\nformat = json\n')
        cfg = RunConfig.resolve('simulate', {'n': 10, 'spec': 'toy'}, {'n': 75, 'spec': None}, path)
        assert cfg.params == {'n': 75, 'spec': 'toy'}
        assert cfg.seed == 4
        assert cfg.fmt == 'json'

    def test_hash_tracks_params(self):
        first = RunConfig.resolve('simulate', {'n': 10}, {})
        second = RunConfig.resolve('simulate', {'n': 11}, {})
        assert first.hash != second.hash
        assert first.hash == RunConfig.resolve('simulate', {'n': 10}, {'out_dir': 'elsewhere'}).hash

    def test_unknown_key(self, tmp_path):
        path = tmp_path / 'run.cfg'
        path.write_text('bogus = 1\n')
        with pytest.raises(ParseError, match='Unknown key'):
            RunConfig.resolve('simulate', {'n': 10}, {}, path)

    @pytest.mark.parametrize('flags', [{'format': 'xml'}, {'seed': -1}])
    def test_rejects(self, flags):
        with pytest.raises(ParseError):
            RunConfig.resolve('simulate', {'n': 10}, flags)


def _write_policy(path, policy: InstrumentPolicy):
    policy.to_frame().to_csv(path, index=False)
    return str(path)


class TestSimulateCommand:

    def test_writes_stamped_dataset(self, tmp_path):
        assert main(['simulate', '--n', '100', '--seed', '3', '--out-dir', str(tmp_path)]) == ExitCode.OK
        frame = pd.read_csv(tmp_path / 'data.csv')
        assert list(frame.columns) == ['w1', 'z', 'a', 'y']
        assert len(frame) == 100
        meta = json.loads((tmp_path / 'data.meta.json').read_text())
        assert meta['seed'] == 3
        assert len(meta['config_hash']) == 16
        assert meta['version']

    def test_reruns_are_identical(self, tmp_path):
        for name in ('first', 'second'):
            assert main(['simulate', '--n', '200', '--seed', '9', '--out-dir', str(tmp_path / name)]) == ExitCode.OK
        assert (tmp_path / 'first' / 'data.csv').read_bytes() == (tmp_path / 'second' / 'data.csv').read_bytes()

    def test_intervention_world(self, tmp_path):
        policy = _write_policy(tmp_path / 'policy.csv', toy_policy())
        args = ['simulate', '--n', '50', '--world', 'instrument_intervention', '--policy', policy, '--out-dir', str(tmp_path)]
        assert main(args) == ExitCode.OK
        assert json.loads((tmp_path / 'data.meta.json').read_text())['world'] == 'instrument_intervention'

    def test_json_format(self, tmp_path):
        assert main(['simulate', '--n', '10', '--format', 'json', '--out-dir', str(tmp_path)]) == ExitCode.OK
        assert len(json.loads((tmp_path / 'data.json').read_text())['rows']) == 10

    def test_bad_spec_exits_2(self, tmp_path):
        path = tmp_path / 'bad.spec'
        path.write_text(dump_spec(toy_spec()).replace('"additive"', '"quadratic"'))
        assert main(['simulate', '--spec', str(path), '--out-dir', str(tmp_path)]) == ExitCode.VALIDATION

    def test_missing_policy_exits_2(self, tmp_path):
        assert main(['simulate', '--world', 'instrument_intervention', '--out-dir', str(tmp_path)]) == ExitCode.VALIDATION

    def test_unknown_flag(self):
        assert main(['simulate', '--bogus']) == 2


class TestTmleCommand:

    def test_toy(self, tmp_path):
        assert main(['simulate', '--n', '5000', '--seed', '1', '--out-dir', str(tmp_path)]) == ExitCode.OK
        policy = _write_policy(tmp_path / 'policy.csv', toy_policy())
        args = ['tmle', '--data', str(tmp_path / 'data.csv'), '--policy', policy, '--seed', '1', '--out-dir', str(tmp_path)]
        assert main(args) == ExitCode.OK
        result = json.loads((tmp_path / 'tmle.json').read_text())
        assert abs(result['psi'] - 1.02) < 4 * result['se']
        assert result['identification_covariates'] == ['w1']
        assert [row['p1'] for row in result['induced_marginal']] == pytest.approx([0.58, 0.68], abs=0.05)

    def test_oregon_point_mass(self, tmp_path):
        args = ['simulate', '--spec', 'oregon_schema', '--n', '3000', '--seed', '2', '--out-dir', str(tmp_path)]
        assert main(args) == ExitCode.OK
        policy = _write_policy(tmp_path / 'policy.csv', InstrumentPolicy.point_mass([0, 1], 0))
        assert main(['tmle', '--data', str(tmp_path / 'data.csv'), '--policy', policy, '--out-dir', str(tmp_path)]) == ExitCode.OK
        result = json.loads((tmp_path / 'tmle.json').read_text())
        assert result['identification_covariates'] == []
        assert result['induced_marginal'][0]['p1'] == 0.0

    def test_malformed_data(self, tmp_path):
        (tmp_path / 'data.csv').write_text('w1,z,a,y\n0,1,1,0.5\n1,0,x,0.2\n')
        policy = _write_policy(tmp_path / 'policy.csv', toy_policy())
        assert main(['tmle', '--data', str(tmp_path / 'data.csv'), '--policy', policy]) == ExitCode.VALIDATION


class TestReplicateCommand:

    def test_smoke(self, tmp_path):
        args = ['replicate', '--n-list', '100,200', '--B', '3', '--seed', '1', '--out-dir', str(tmp_path)]
        assert main(args) == ExitCode.OK
        table = pd.read_csv(tmp_path / 'table.csv')
        assert table['n'].tolist() == [100, 200]
        report = json.loads((tmp_path / 'report.json').read_text())
        assert report['files'] == ['table.csv', 'draws_n100.csv', 'draws_n200.csv']
        assert report['replications'] == 3

    def test_density_source(self, tmp_path):
        args = ['replicate', '--n-list', '100', '--B', '2', '--h-source', 'fitted', '--out-dir', str(tmp_path)]
        assert main(args) == ExitCode.OK
        assert json.loads((tmp_path / 'report.json').read_text())['h_source'] == 'fitted'

    def test_bad_density_source_in_config(self, tmp_path):
        (tmp_path / 'run.cfg').write_text('h_source = guessed\n')
        args = ['replicate', '--n-list', '100', '--B', '2', '--config', str(tmp_path / 'run.cfg'), '--out-dir', str(tmp_path)]
        assert main(args) == ExitCode.VALIDATION

    def test_percent(self, tmp_path):
        args = ['replicate', '--n-list', '100', '--B', '4', '--percent', '--out-dir', str(tmp_path)]
        assert main(args) == ExitCode.OK
        table = pd.read_csv(tmp_path / 'table.csv')
        assert table['coverage_0.05'].iloc[0] in (0.0, 25.0, 50.0, 75.0, 100.0)


class TestProjectionCommands:

    def test_ls_b_matrix(self, tmp_path):
        (tmp_path / 'B.csv').write_text('a,0,1\n0,0.5,0.7\n1,0.5,0.3\n')
        args = ['ls-project', '--B-matrix', str(tmp_path / 'B.csv'), '--g-star', '0.4,0.6', '--out-dir', str(tmp_path)]
        assert main(args) == ExitCode.OK
        result = json.loads((tmp_path / 'ls_result.json').read_text())
        assert result['h'] == pytest.approx([1.0, 0.0], abs=1e-9)
        assert result['implied'] == pytest.approx([0.5, 0.5], abs=1e-9)
        assert result['unconstrained_solution'] == pytest.approx([1.5, -0.5])
        assert (tmp_path / 'ls_trace.csv').is_file()

    def test_ls_malformed_b(self, tmp_path):
        (tmp_path / 'B.csv').write_text('a,0,1\n0,0.5,abc\n1,0.5,0.3\n')
        args = ['ls-project', '--B-matrix', str(tmp_path / 'B.csv'), '--g-star', '0.4,0.6', '--out-dir', str(tmp_path)]
        assert main(args) == ExitCode.VALIDATION

    def test_ls_per_stratum(self, tmp_path):
        assert main(['simulate', '--n', '2000', '--out-dir', str(tmp_path)]) == ExitCode.OK
        (tmp_path / 'target.csv').write_text('w1,p1\n0,0.58\n1,0.68\n')
        args = ['ls-project', '--data', str(tmp_path / 'data.csv'), '--target', str(tmp_path / 'target.csv'), '--out-dir', str(tmp_path)]
        assert main(args) == ExitCode.OK
        policy = pd.read_csv(tmp_path / 'ls_policy.csv')
        assert list(policy.columns) == ['w1', 'z', 'probability']

    def test_kl_binary(self, tmp_path):
        assert main(['simulate', '--n', '20000', '--seed', '5', '--out-dir', str(tmp_path)]) == ExitCode.OK
        (tmp_path / 'target.csv').write_text('w1,p1\n0,0.58\n1,0.68\n')
        args = [
            'kl-project', '--data', str(tmp_path / 'data.csv'), '--target', str(tmp_path / 'target.csv'),
            '--lam', '0', '--tol', '1e-4', '--max-iter', '500', '--out-dir', str(tmp_path),
        ]
        assert main(args) == ExitCode.OK
        result = json.loads((tmp_path / 'kl_result.json').read_text())
        assert result['converged']
        assert result['kl_projected'] < 1e-3
        surface = pd.read_csv(tmp_path / 'kl_policy.csv')
        np.testing.assert_allclose(surface['h1'], [0.7, 0.4], atol=0.1)

    def test_kl_nonconvergence_exit_code(self, tmp_path):
        args = ['kl-project', '--gaussian-world', '--n', '100', '--lam', '0.1', '--max-iter', '1', '--tol', '0', '--out-dir', str(tmp_path)]
        with pytest.warns(RuntimeWarning):
            assert main(args) == ExitCode.NONCONVERGENCE
        result = json.loads((tmp_path / 'kl_result.json').read_text())
        assert set(result) >= {'seed', 'config_hash', 'version', 'kl_projected', 'kl_natural'}
