import json

import pandas as pd
import pytest

import main as entrypoint
from domproj.core import dump_config
from main import main
from tests.conftest import make_tiny_config


def write_config(path, **changes):
    path.write_text(dump_config(make_tiny_config(**changes)))
    return str(path)


def last_json(text):
    return json.loads(text.strip().splitlines()[-1])


def run_pipeline(out_dir, config):
    common = ['--out-dir', str(out_dir), '--run-id', 'tiny']
    assert main(['generate-data', '--config', config, '--count', '4', *common]) == 0
    assert main(['train-translation', *common]) == 0
    assert main(['train-classifier', '--mode', 'stargan', *common]) == 0
    assert main(['evaluate', '--split', 'ood_val', '--split', 'ood_test', '--method', 'base', '--method', 'naive',
                 '--method', 'top_k:2', '--method', 'weighted:1', *common]) == 0
    return out_dir / 'tiny'


@pytest.fixture(scope='module')
def trained_run(tmp_path_factory):
    root = tmp_path_factory.mktemp('cli')
    return run_pipeline(root / 'runs', write_config(root / 'tiny.yaml'))


class TestPipeline:
    def test_run_directory(self, trained_run):
        assert (trained_run / 'config.yaml').is_file()
        assert (trained_run / 'data' / 'train').is_dir()
        assert (trained_run / 'translation' / 'step_4' / 'meta.json').is_file()
        assert (trained_run / 'classifier' / 'step_4' / 'classifier.pt').is_file()
        meta = json.loads((trained_run / 'metadata.json').read_text())
        assert meta['commands'] == ['generate-data', 'train-translation', 'train-classifier', 'evaluate']

    def test_metrics_table(self, trained_run):
        metrics = pd.read_csv(trained_run / 'metrics.csv')
        assert list(metrics.columns) == ['run_id', 'seed', 'split', 'method', 'metric_name', 'value']
        assert set(metrics['method']) == {'base', 'tta_naive', 'tta_top_k2', 'tta_weighted_T1'}
        assert set(metrics['split']) == {'ood_val', 'ood_test'}
        accuracy = metrics[metrics['metric_name'] == 'accuracy']['value']
        assert accuracy.between(0, 1).all()

    def test_rerun_is_identical(self, tmp_path, trained_run):
        rerun = run_pipeline(tmp_path / 'runs', write_config(tmp_path / 'tiny.yaml'))
        assert (rerun / 'metrics.csv').read_bytes() == (trained_run / 'metrics.csv').read_bytes()

    def test_sweep_and_features(self, trained_run, capsys):
        common = ['--out-dir', str(trained_run.parent), '--run-id', 'tiny']
        assert main(['sweep', '--param', 'k', *common]) == 0
        result = last_json(capsys.readouterr().out)
        assert list(result['accuracy']) == ['1', '2', '3']
        assert (trained_run / 'sweep_k_ood_val.csv').is_file()

        assert main(['export-features', '--projections', *common]) == 0
        result = last_json(capsys.readouterr().out)
        features = pd.read_csv(trained_run / 'features_ood_test.csv')
        assert result['rows'] == len(features)
        assert features['projected'].sum() == 3 * (~features['projected']).sum()

    def test_baselines(self, trained_run, capsys):
        common = ['--out-dir', str(trained_run.parent), '--run-id', 'tiny']
        assert main(['evaluate', '--method', 'geometric', '--method', 'he_jitter', *common]) == 0
        results = last_json(capsys.readouterr().out)['results']
        assert set(results) == {'ood_test/tta_geometric', 'ood_test/tta_he_jitter'}

    def test_benchmark_keeps_config(self, trained_run, capsys):
        before = (trained_run / 'config.yaml').read_text()
        assert main(['benchmark', '--methods', 'none', 'translation', '--batch-size', '2', '--repetitions', '1',
                     '--warmup', '0', '--domains', '5', '--out-dir', str(trained_run.parent), '--run-id', 'tiny']) == 0
        assert (trained_run / 'config.yaml').read_text() == before
        table = pd.read_csv(trained_run / 'benchmark.csv')
        assert set(table['num_domains']) == {5}


class TestErrors:
    def test_negative_weight(self, tmp_path, capsys):
        config = tmp_path / 'bad.yaml'
        config.write_text('lambda_cyc: -1\n')
        assert main(['generate-data', '--config', str(config), '--out-dir', str(tmp_path)]) == 2
        error = last_json(capsys.readouterr().err)
        assert error['error'] == 'validation_error'
        assert error['key'] == 'lambda_cyc'
        assert error['command'] == 'generate-data'

    def test_unknown_key(self, tmp_path, capsys):
        config = tmp_path / 'bad.yaml'
        config.write_text('style_dimension: 8\n')
        assert main(['evaluate', '--config', str(config), '--out-dir', str(tmp_path)]) == 2
        assert last_json(capsys.readouterr().err)['key'] == 'style_dimension'

    def test_missing_checkpoint(self, tmp_path, capsys):
        common = ['--out-dir', str(tmp_path), '--run-id', 'tiny']
        assert main(['generate-data', '--config', write_config(tmp_path / 'c.yaml'), '--count', '2', *common]) == 0
        assert main(['evaluate', *common]) == 2
        assert last_json(capsys.readouterr().err)['error'] == 'not_found'
        assert main(['train-classifier', '--mode', 'stargan', *common]) == 2
        assert last_json(capsys.readouterr().err)['error'] == 'not_found'

    def test_no_dataset(self, tmp_path, capsys):
        config = write_config(tmp_path / 'c.yaml')
        assert main(['train-translation', '--config', config, '--out-dir', str(tmp_path)]) == 2
        assert last_json(capsys.readouterr().err)['error'] == 'data_error'

    def test_benchmark_repetitions(self, tmp_path, capsys):
        config = write_config(tmp_path / 'c.yaml')
        assert main(['benchmark', '--config', config, '--repetitions', '0', '--methods', 'none',
                     '--out-dir', str(tmp_path)]) == 2
        assert last_json(capsys.readouterr().err)['error'] == 'argument_error'

    @pytest.mark.parametrize('argv, command', [
        (['no-such-command'], None),
        (['sweep', '--param', 'q'], 'sweep'),
        (['benchmark', '--repetitions', 'many'], 'benchmark'),
        (['evaluate', '--split', 'train_val'], 'evaluate'),
        ([], None),
    ])
    def test_usage_errors_are_json(self, argv, command, capsys):
        assert main(argv) == 2
        error = last_json(capsys.readouterr().err)
        assert error['error'] == 'argument_error'
        assert error['command'] == command
        assert error['message']

    def test_help_still_exits_cleanly(self, capsys):
        assert main(['--help']) == 0
        assert 'usage' in capsys.readouterr().out

    def test_fractional_k(self, tmp_path, capsys):
        config = write_config(tmp_path / 'c.yaml')
        assert main(['sweep', '--config', config, '--param', 'k', '--values', '1', '2.5',
                     '--out-dir', str(tmp_path)]) == 2
        error = last_json(capsys.readouterr().err)
        assert error['error'] == 'argument_error'
        assert '2.5' in error['message']


def test_broken_command_module_is_logged(monkeypatch, caplog):
    monkeypatch.setattr(entrypoint, 'commands_list', ['commands.datasets', 'commands.no_such_module'])
    cli = entrypoint.CommandLine()
    with caplog.at_level('ERROR', logger='domproj'):
        entrypoint.load_commands(cli)
    assert 'generate-data' in cli.subparsers.choices
    record = next(r for r in caplog.records if 'commands.no_such_module' in r.getMessage())
    assert record.exc_info is not None
