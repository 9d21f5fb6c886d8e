import json
import logging
from typing import Dict, List

import pandas as pd

from domproj.core import EnsembleConfig, EnsembleStrategy, ExperimentConfig, torch_generator
from domproj.data import Split, SyntheticRanges, generate_synthetic_dg
from domproj.pipeline import MethodSpec, TTAPredictor, collect_tta_cache, evaluate, record_report
from domproj.storage import RunStore, save_checkpoint
from domproj.training import ClassifierTrainer, load_translation_model, train_translation

logger = logging.getLogger(__name__)

EVAL_SPLITS = (Split.ID_VAL, Split.OOD_VAL, Split.OOD_TEST)
BASELINES = ('base', 'geometric', 'color_jitter', 'he_jitter')


class ExperimentCommands:
    """Desk-scale domain generalization experiment on synthetic stain-shifted data"""

    def __init__(self, cli):
        self.cli = cli

    def register(self, cli):
        command = cli.add_command('run-experiment', self.run_experiment,
                                  'Generate data, train everything and compare TTA methods over several seeds')
        command.add_argument('--seeds', type=int, nargs='+', help='seeds (default: the config seed)')
        command.add_argument('--count', type=int, default=100, help='base images per class and domain')
        command.add_argument('--target-domains', type=int, default=2)
        command.add_argument('--no-shift', action='store_true', help='identity shift everywhere (control run)')
        command.add_argument('--train-modes', nargs='+', default=['none', 'stargan'],
                             choices=['none', 'stargan', 'color_jitter', 'he_jitter', 'geometric'],
                             help='classifier train-time augmentations to compare')
        command.add_argument('--k', type=int, help='k of top-k ensembling (default: ensemble_k or S-1)')
        command.add_argument('--temperature', type=float,
                             help='T of weighted ensembling (default: ensemble_temperature or 1)')
        command.add_argument('--sweep-k', action='store_true',
                             help='also record top-k for every k in 1..S from the same translation pass')
        command.add_argument('--progress', action='store_true', help='show progress bars')

    def ensembles(self, cfg: ExperimentConfig, args) -> List[EnsembleConfig]:
        k = args.k or cfg.ensemble_k or max(1, cfg.num_domains - 1)
        temperature = args.temperature or cfg.ensemble_temperature or 1.0
        chosen = [EnsembleConfig(), EnsembleConfig(EnsembleStrategy.TOP_K, k=k),
                  EnsembleConfig(EnsembleStrategy.WEIGHTED, temperature=temperature)]
        if not args.sweep_k:
            return chosen
        tags = {c.tag for c in chosen}
        swept = [EnsembleConfig(EnsembleStrategy.TOP_K, k=k) for k in range(1, cfg.num_domains + 1)]
        return chosen + [c for c in swept if c.tag not in tags]

    def run_seed(self, cfg: ExperimentConfig, args, seed: int) -> pd.DataFrame:
        cfg = cfg.replace(seed=seed)
        store = RunStore(args.out_dir, f'{cfg.run_id}/seed_{seed}').open(cfg, args.command, no_shift=args.no_shift)
        ranges = SyntheticRanges.no_shift() if args.no_shift else SyntheticRanges()
        bundle = generate_synthetic_dg(args.count, cfg.num_domains, args.target_domains, ranges, seed,
                                       cfg.num_classes, cfg.image_resolution).merged()
        bundle.save_mapping(store.path('domain_mapping.json'))
        store.save_table('data_summary.csv', bundle.summary())

        translation_checkpoint = train_translation(cfg, bundle, store, progress=args.progress)
        translation = load_translation_model(cfg, translation_checkpoint)
        ensembles = self.ensembles(cfg, args)

        for mode in args.train_modes:
            trainer = ClassifierTrainer(cfg, bundle, mode, translation if mode == 'stargan' else None,
                                        progress=args.progress)
            checkpoint = trainer.train()
            save_checkpoint(checkpoint, store.root / f'classifier_{mode}' / f'step_{checkpoint.step}')
            store.save_loss_log(f'classifier_{mode}', trainer.loss_rows)
            classifier = trainer.model.eval()

            for split in EVAL_SPLITS:
                dataset = bundle[split]
                baselines = BASELINES if mode == 'none' else ('base',)
                for name in baselines:
                    method = MethodSpec.parse(name, cfg.jitter_views)
                    evaluate(dataset, method, cfg, classifier, store=store, name=f'{mode}+{method.name}')
                # one translation pass per split, shared by every ensembling strategy
                predictor = TTAPredictor(translation, classifier, cfg.tta_draws_per_domain)
                cache = collect_tta_cache(predictor, dataset, cfg.eval_batch_size, torch_generator(seed, 'latent'))
                for ensemble_cfg in ensembles:
                    report = cache.evaluate(ensemble_cfg)
                    report.method = f'{mode}+{ensemble_cfg.tag}'
                    record_report(store, report, dataset.class_names, seed)
        store.close()
        return store.get_metrics()

    def run_experiment(self, args):
        cfg = self.cli.load_config(args)
        seeds = args.seeds or [cfg.seed]
        store = self.cli.open_store(args, cfg)
        frames = []
        for seed in seeds:
            logger.info('Experiment seed %d (%d of %d)', seed, len(frames) + 1, len(seeds))
            frames.append(self.run_seed(cfg, args, seed))
        metrics = pd.concat(frames, ignore_index=True)
        store.save_table('metrics.csv', metrics)
        summary = summarize(metrics)
        store.save_table('summary.csv', summary)
        store.close()
        print(json.dumps({'command': args.command, 'seeds': seeds, 'no_shift': args.no_shift,
                          'median_accuracy': median_table(summary)}))


def summarize(metrics: pd.DataFrame, metric: str = 'accuracy') -> pd.DataFrame:
    """Median, mean and std over seeds of one metric per (method, split)"""
    rows = metrics[metrics['metric_name'] == metric]
    summary = rows.groupby(['method', 'split'])['value'].agg(['median', 'mean', 'std', 'count']).reset_index()
    summary.insert(2, 'metric_name', metric)
    return summary


def median_table(summary: pd.DataFrame) -> Dict[str, Dict[str, float]]:
    """{method: {split: median}} in method-by-split layout"""
    pivot = summary.pivot(index='method', columns='split', values='median')
    return {method: {split: float(value) for split, value in row.items()} for method, row in pivot.iterrows()}


def setup(cli):
    cli.add_group(ExperimentCommands(cli))
