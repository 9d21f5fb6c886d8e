import json

from domproj.core import ArgumentError, resolve_device
from domproj.pipeline import BENCHMARK_ROWS, benchmark_inference
from domproj.training import build_classifier, load_classifier, load_translation_model


class BenchmarkCommands:
    """Inference timing of every TTA method"""

    def __init__(self, cli):
        self.cli = cli

    def register(self, cli):
        command = cli.add_command('benchmark', self.benchmark, 'Median inference time per batch of each TTA method')
        command.add_argument('--methods', nargs='+', choices=list(BENCHMARK_ROWS), default=list(BENCHMARK_ROWS))
        command.add_argument('--batch-size', type=int, default=32)
        command.add_argument('--repetitions', type=int, default=10)
        command.add_argument('--warmup', type=int, default=2)
        command.add_argument('--domains', type=int,
                             help='number of source domains S; other than the config it times untrained networks')
        command.add_argument('--trained', action='store_true', help='time the run\'s trained checkpoints')

    def benchmark(self, args):
        cfg = self.cli.load_config(args)
        override = bool(args.domains) and args.domains != cfg.num_domains
        if override:
            if args.trained:
                raise ArgumentError('--trained cannot be combined with a different --domains')
            cfg = cfg.replace(num_domains=args.domains, ensemble_strategy='naive', ensemble_k=None,
                              ensemble_temperature=None)
        store = self.cli.open_store(args, cfg, record_config=not override)
        if args.trained:
            classifier = load_classifier(cfg, store.require_checkpoint('classifier'))
            translation = None
            if any(m.startswith('translation') for m in args.methods):
                translation = load_translation_model(cfg, store.require_checkpoint('translation'))
        else:
            # timing only, weights do not matter
            classifier = build_classifier(cfg).to(resolve_device(cfg.device)).eval()
            translation = None

        table = benchmark_inference(args.methods, args.batch_size, args.repetitions, cfg, classifier, translation,
                                    args.warmup)
        table.insert(0, 'num_domains', cfg.num_domains)
        store.save_table('benchmark.csv', table)
        store.close()
        print(json.dumps({'command': args.command,
                          'median_ms': dict(zip(table['method'], table['median_ms']))}))


def setup(cli):
    cli.add_group(BenchmarkCommands(cli))
