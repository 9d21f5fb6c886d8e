import json

from domproj.data import load_dataset_for_config
from domproj.training import load_translation_model, train_classifier, train_translation
from domproj.translation import export_onnx


class TrainingCommands:
    """Commands for training the translation model and the classifier"""

    def __init__(self, cli):
        self.cli = cli

    def register(self, cli):
        command = cli.add_command('train-translation', self.train_translation,
                                  'Train the multi-domain translation model (G, F, E, D)')
        command.add_argument('--steps', type=int, help='total steps (default: translation_steps)')
        command.add_argument('--resume', help='checkpoint directory to resume from')
        command.add_argument('--progress', action='store_true', help='show a progress bar')

        command = cli.add_command('train-classifier', self.train_classifier, 'Train the patch classifier')
        command.add_argument('--mode', choices=['none', 'stargan', 'color_jitter', 'he_jitter', 'geometric'],
                             help='train-time augmentation (default: augmentation_mode)')
        command.add_argument('--translation', help='translation checkpoint for --mode stargan (default: latest)')
        command.add_argument('--steps', type=int, help='total steps (default: classifier_steps)')
        command.add_argument('--resume', help='checkpoint directory to resume from')
        command.add_argument('--progress', action='store_true', help='show a progress bar')

        command = cli.add_command('export-onnx', self.export_onnx, 'Export the translation networks as ONNX graphs')
        command.add_argument('--translation', help='translation checkpoint (default: latest)')
        command.add_argument('--dest', help='output folder (default: <run dir>/onnx)')

    def train_translation(self, args):
        cfg = self.cli.load_config(args)
        bundle = load_dataset_for_config(cfg)
        store = self.cli.open_store(args, cfg)
        bundle.save_mapping(store.path('domain_mapping.json'))
        checkpoint = train_translation(cfg, bundle, store, resume=args.resume, steps=args.steps,
                                       progress=args.progress)
        store.close()
        print(json.dumps({'command': args.command, 'step': checkpoint.step,
                          'checkpoint': str(store.checkpoint_dir('translation', checkpoint.step))}))

    def train_classifier(self, args):
        cfg = self.cli.load_config(args)
        mode = args.mode or cfg.augmentation_mode
        bundle = load_dataset_for_config(cfg)
        store = self.cli.open_store(args, cfg)
        translation = store.require_checkpoint('translation', args.translation) if mode == 'stargan' else None
        checkpoint = train_classifier(cfg, bundle, mode, translation, store, resume=args.resume, steps=args.steps,
                                      progress=args.progress)
        store.close()
        print(json.dumps({'command': args.command, 'mode': mode, 'step': checkpoint.step,
                          'checkpoint': str(store.checkpoint_dir('classifier', checkpoint.step))}))

    def export_onnx(self, args):
        cfg = self.cli.load_config(args)
        store = self.cli.open_store(args, cfg)
        model = load_translation_model(cfg, store.require_checkpoint('translation', args.translation))
        written = export_onnx(model, args.dest or store.root / 'onnx')
        store.close()
        print(json.dumps({'command': args.command, 'files': [str(p) for p in written]}))


def setup(cli):
    cli.add_group(TrainingCommands(cli))
