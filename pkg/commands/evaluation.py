import json

from domproj.core import ArgumentError, torch_generator
from domproj.data import Split, load_dataset_for_config
from domproj.pipeline import MethodSpec, TTAPredictor, collect_tta_cache, evaluate, export_features, sweep
from domproj.training import load_classifier, load_translation_model

SPLIT_CHOICES = [split.value for split in Split]


class EvaluationCommands:
    """Commands that run trained models on a dataset split"""

    def __init__(self, cli):
        self.cli = cli

    def register(self, cli):
        command = cli.add_command('evaluate', self.evaluate, 'Evaluate base, baseline TTA and translation TTA methods')
        command.add_argument('--split', action='append', choices=SPLIT_CHOICES,
                             help='split to evaluate, repeatable (default: ood_test)')
        command.add_argument('--method', action='append',
                             help="base, geometric, color_jitter, he_jitter, naive, top_k:<k> or weighted:<T>; "
                                  "repeatable (default: base and the config's ensemble strategy)")
        command.add_argument('--translation', help='translation checkpoint (default: latest)')
        command.add_argument('--classifier', help='classifier checkpoint (default: latest)')

        command = cli.add_command('sweep', self.sweep, 'Sweep k of top-k or T of weighted ensembling')
        command.add_argument('--param', choices=['k', 'T'], required=True)
        command.add_argument('--values', type=float, nargs='+', help='values (default: 1..S for k, a log grid for T)')
        command.add_argument('--split', choices=SPLIT_CHOICES, default=Split.OOD_VAL.value)
        command.add_argument('--translation', help='translation checkpoint (default: latest)')
        command.add_argument('--classifier', help='classifier checkpoint (default: latest)')

        command = cli.add_command('export-features', self.export_features,
                                  'Write penultimate classifier features for a 2-D projection')
        command.add_argument('--split', choices=SPLIT_CHOICES, default=Split.OOD_TEST.value)
        command.add_argument('--projections', action='store_true', help='add the S projections of every image')
        command.add_argument('--translation', help='translation checkpoint (default: latest)')
        command.add_argument('--classifier', help='classifier checkpoint (default: latest)')
        command.add_argument('--dest', help='output CSV (default: <run dir>/features_<split>.csv)')

    def evaluate(self, args):
        cfg = self.cli.load_config(args)
        methods = [MethodSpec.parse(m, cfg.jitter_views) for m in (args.method or ['base', self._default_method(cfg)])]
        splits = args.split or [Split.OOD_TEST.value]
        bundle = load_dataset_for_config(cfg)
        store = self.cli.open_store(args, cfg)
        classifier = load_classifier(cfg, store.require_checkpoint('classifier', args.classifier))
        translation = None
        if any(m.kind == 'translation' for m in methods):
            translation = load_translation_model(cfg, store.require_checkpoint('translation', args.translation))

        results = {}
        for split in splits:
            for method in methods:
                report = evaluate(bundle[split], method, cfg, classifier, translation, store)
                results[f'{split}/{method.name}'] = {'accuracy': report.accuracy, 'weighted_f1': report.weighted_f1}
        store.close()
        print(json.dumps({'command': args.command, 'results': results}))

    @staticmethod
    def _default_method(cfg) -> str:
        ensemble = cfg.ensemble
        if ensemble.k is not None:
            return f'top_k:{ensemble.k}'
        if ensemble.temperature is not None:
            return f'weighted:{ensemble.temperature}'
        return 'naive'

    def sweep(self, args):
        cfg = self.cli.load_config(args)
        if args.values:
            if args.param == 'k':
                fractional = [v for v in args.values if not float(v).is_integer()]
                if fractional:
                    raise ArgumentError(f'k must be an integer, got {", ".join(f"{v:g}" for v in fractional)}')
                values = [int(v) for v in args.values]
            else:
                values = args.values
        elif args.param == 'k':
            values = list(range(1, cfg.num_domains + 1))
        else:
            values = [0.01, 0.03, 0.1, 0.3, 1.0, 3.0, 10.0, 100.0, 1e9]
        bundle = load_dataset_for_config(cfg)
        store = self.cli.open_store(args, cfg)
        predictor = TTAPredictor(load_translation_model(cfg, store.require_checkpoint('translation', args.translation)),
                                 load_classifier(cfg, store.require_checkpoint('classifier', args.classifier)),
                                 cfg.tta_draws_per_domain)
        cache = collect_tta_cache(predictor, bundle[args.split], cfg.eval_batch_size,
                                  torch_generator(cfg.seed, 'latent'))
        table = sweep(args.param, values, cache, store)
        store.close()
        print(json.dumps({'command': args.command, 'param': args.param, 'split': args.split,
                          'accuracy': dict(zip(map(str, table['value']), table['accuracy']))}))

    def export_features(self, args):
        cfg = self.cli.load_config(args)
        bundle = load_dataset_for_config(cfg)
        store = self.cli.open_store(args, cfg)
        classifier = load_classifier(cfg, store.require_checkpoint('classifier', args.classifier))
        translation = None
        if args.projections:
            translation = load_translation_model(cfg, store.require_checkpoint('translation', args.translation))
        dest = args.dest or store.path(f'features_{args.split}.csv')
        table = export_features(bundle[args.split], classifier, cfg, translation, dest)
        store.close()
        print(json.dumps({'command': args.command, 'rows': len(table), 'file': str(dest)}))


def setup(cli):
    cli.add_group(EvaluationCommands(cli))
