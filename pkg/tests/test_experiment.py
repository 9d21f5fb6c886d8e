from types import SimpleNamespace

import numpy as np
import pandas as pd
import pytest

from commands.experiment import ExperimentCommands, median_table, summarize
from domproj.core import dump_config
from main import main
from tests.conftest import make_tiny_config

SEEDS = [0, 1, 2, 3, 4]


def metric_rows(values):
    return pd.DataFrame([{'run_id': 'r', 'seed': seed, 'split': split, 'method': method, 'metric_name': 'accuracy',
                          'value': value} for seed, split, method, value in values])


class TestSummary:
    def test_median_over_seeds(self):
        metrics = metric_rows([(0, 'ood_test', 'base', 0.5), (1, 'ood_test', 'base', 0.7),
                               (2, 'ood_test', 'base', 0.9), (0, 'ood_test', 'tta', 0.8)])
        summary = summarize(metrics)
        base = summary[summary['method'] == 'base'].iloc[0]
        assert base['median'] == pytest.approx(0.7)
        assert base['count'] == 3
        assert median_table(summary) == {'base': {'ood_test': 0.7}, 'tta': {'ood_test': 0.8}}

    def test_other_metrics_ignored(self):
        metrics = metric_rows([(0, 'ood_val', 'base', 0.5)])
        metrics.loc[len(metrics)] = ['r', 0, 'ood_val', 'base', 'weighted_f1', 0.1]
        assert summarize(metrics)['median'].tolist() == [0.5]


class TestEnsembleChoice:
    def args(self, **changes):
        return SimpleNamespace(**{'k': None, 'temperature': None, 'sweep_k': False, **changes})

    def test_default_strategies(self):
        tags = [c.tag for c in ExperimentCommands(None).ensembles(make_tiny_config(), self.args())]
        assert tags == ['tta_naive', 'tta_top_k2', 'tta_weighted_T1']

    def test_sweep_adds_every_k_once(self):
        tags = [c.tag for c in ExperimentCommands(None).ensembles(make_tiny_config(), self.args(sweep_k=True))]
        assert tags == ['tta_naive', 'tta_top_k2', 'tta_weighted_T1', 'tta_top_k1', 'tta_top_k3']


def run_experiment(out_dir, *extra):
    """Desk-scale run: 3 train and 2 target domains at 64x64, base classifier only"""
    config = out_dir / 'exp.yaml'
    config.write_text(dump_config(make_tiny_config(
        run_id='exp', image_resolution=64, generator_channels=16, encoder_channels=16, max_channels=64,
        translation_steps=2000, classifier_steps=1000, classifier_lr=1e-3, log_every=200, checkpoint_every=5000,
        eval_batch_size=32, translation_batch_size=8, classifier_batch_size=32)))
    code = main(['run-experiment', '--config', str(config), '--out-dir', str(out_dir),
                 '--seeds', *map(str, SEEDS), '--count', '40', '--target-domains', '2', '--train-modes', 'none',
                 '--sweep-k', *extra])
    assert code == 0
    return pd.read_csv(out_dir / 'exp' / 'metrics.csv')


def target_accuracy(metrics, method):
    rows = metrics[(metrics['split'] == 'ood_test') & (metrics['metric_name'] == 'accuracy')
                   & (metrics['method'] == method)]
    return rows.set_index('seed')['value'].sort_index()


@pytest.fixture(scope='module')
def shifted(tmp_path_factory):
    return run_experiment(tmp_path_factory.mktemp('shifted'))


@pytest.fixture(scope='module')
def unshifted(tmp_path_factory):
    return run_experiment(tmp_path_factory.mktemp('unshifted'), '--no-shift')


@pytest.mark.slow
class TestToyDomainShift:
    """Desk-scale versions of the domain generalization claims, over five seeds"""

    def test_every_seed_recorded(self, shifted):
        assert list(target_accuracy(shifted, 'none+base').index) == SEEDS

    def test_naive_tta_beats_base_on_target(self, shifted):
        base = target_accuracy(shifted, 'none+base').median()
        naive = target_accuracy(shifted, 'none+tta_naive').median()
        assert base < naive

    def test_no_shift_gap_under_two_points(self, unshifted):
        base = target_accuracy(unshifted, 'none+base').median()
        naive = target_accuracy(unshifted, 'none+tta_naive').median()
        assert abs(naive - base) < 0.02

    def test_top_k_with_all_domains_matches_naive(self, shifted):
        np.testing.assert_allclose(target_accuracy(shifted, 'none+tta_top_k3'),
                                   target_accuracy(shifted, 'none+tta_naive'), rtol=0, atol=1e-12)

    def test_single_projection_no_better_than_all(self, shifted):
        k1 = target_accuracy(shifted, 'none+tta_top_k1')
        k_all = target_accuracy(shifted, 'none+tta_top_k3')
        assert int((k1 <= k_all).sum()) >= 4
