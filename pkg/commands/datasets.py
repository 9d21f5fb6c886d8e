import json
from pathlib import Path

from domproj.data import SyntheticRanges, generate_synthetic_dg, load_dataset_for_config, save_bundle
from domproj.storage import RunStore


class DatasetCommands:
    """Commands for creating and inspecting datasets"""

    def __init__(self, cli):
        self.cli = cli

    def register(self, cli):
        command = cli.add_command('generate-data', self.generate_data,
                                  'Generate the synthetic multi-domain stain-shift dataset')
        command.add_argument('--train-domains', type=int, default=None, help='source domains (default: num_domains)')
        command.add_argument('--target-domains', type=int, default=2, help='unseen target domains')
        command.add_argument('--count', type=int, default=100, help='base images per class and domain')
        command.add_argument('--no-shift', action='store_true', help='identity shift for every domain (control)')
        command.add_argument('--dest', help='output folder (default: <run dir>/data)')

        cli.add_command('describe-data', self.describe_data,
                        'Count images per split, class and domain of a folder dataset')

    def generate_data(self, args):
        """Write train/id_val/ood_val/ood_test folders and point the run config at them"""
        cfg = self.cli.load_config(args)
        train_domains = args.train_domains or cfg.num_domains
        ranges = SyntheticRanges.no_shift() if args.no_shift else SyntheticRanges()
        synthetic = generate_synthetic_dg(args.count, train_domains, args.target_domains, ranges, cfg.seed,
                                          cfg.num_classes, cfg.image_resolution)
        dest = Path(args.dest) if args.dest else RunStore(args.out_dir, cfg.run_id).root / 'data'
        store = self.cli.open_store(args, cfg.replace(num_domains=train_domains, train_dir=str(dest)))
        bundle = synthetic.merged()
        save_bundle(bundle, dest)
        store.save_json('domain_mapping.json', {'domains': bundle.domain_mapping, 'classes': bundle.class_names})
        store.save_json('synthetic_specs.json', {
            name: {'mixing': spec.mixing.tolist(), 'gain': spec.gain.tolist(), 'bias': spec.bias.tolist(),
                   'blur_sigma': spec.blur_sigma, 'noise_std': spec.noise_std, 'seed': spec.seed}
            for name, spec in synthetic.specs.items()})
        store.save_table('data_summary.csv', bundle.summary())
        store.close()
        print(json.dumps({'command': args.command, 'data': str(dest),
                          'splits': {s.value: len(ds) for s, ds in bundle.splits.items()}}))

    def describe_data(self, args):
        cfg = self.cli.load_config(args)
        bundle = load_dataset_for_config(cfg)
        print(bundle.summary().to_string(index=False))


def setup(cli):
    cli.add_group(DatasetCommands(cli))
