import argparse
import importlib
import json
import logging
import sys
from typing import Callable, List, Optional

from dotenv import load_dotenv

# Environment first: domproj.config reads DOMPROJ_* at import time
load_dotenv()

from domproj import config as defaults  # noqa: E402
from domproj.core import ArgumentError, DomProjError, ExperimentConfig, configure_determinism, load_config  # noqa: E402
from domproj.storage import RunStore  # noqa: E402

logger = logging.getLogger('domproj')

commands_list = [
    'commands.datasets',
    'commands.training',
    'commands.evaluation',
    'commands.benchmark',
    'commands.experiment',
]


def setup_logging(level=logging.INFO):
    """Console logging for the library modules"""
    logging.basicConfig(
        level=level,
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        stream=sys.stderr,
        force=True,
    )


class CommandParser(argparse.ArgumentParser):
    """Usage errors become ArgumentError so they reach the global error handler"""

    def error(self, message):
        raise ArgumentError(f'{self.prog}: {message}')


class CommandLine:
    """Argument parser host; command modules register their subcommands on it"""

    def __init__(self):
        self.parser = CommandParser(
            prog='domproj',
            description='Test-time domain projection: train, evaluate and benchmark translation TTA',
        )
        self.parser.add_argument('-v', '--verbose', action='store_true', help='debug logging')
        self.subparsers = self.parser.add_subparsers(dest='command', required=True, metavar='command')

        # Flags shared by every subcommand
        self.common = CommandParser(add_help=False)
        self.common.add_argument('--config', help='flat YAML experiment config')
        self.common.add_argument('--seed', type=int, help='master seed (overrides the config)')
        self.common.add_argument('--out-dir', default=None, help=f'runs directory (default: {defaults.RUNS_DIR})')
        self.common.add_argument('--run-id', help='run directory name (overrides the config)')
        self.common.add_argument('--device', help='torch device (overrides the config)')
        self.common.add_argument('--data', help='dataset root (overrides train_dir)')
        self.groups = []

    def add_group(self, group):
        group.register(self)
        self.groups.append(group)

    def add_command(self, name: str, handler: Callable, help: str) -> argparse.ArgumentParser:
        command = self.subparsers.add_parser(name, parents=[self.common], help=help, description=help)
        command.set_defaults(handler=handler)
        return command

    def load_config(self, args) -> ExperimentConfig:
        if args.config:
            cfg = load_config(args.config)
        else:
            # Without --config, reuse the config recorded in the run directory
            run_config = RunStore(args.out_dir, args.run_id or ExperimentConfig.run_id).root / 'config.yaml'
            cfg = load_config(run_config) if run_config.is_file() else ExperimentConfig()
        overrides = {key: value for key, value in (
            ('seed', args.seed), ('run_id', args.run_id), ('device', args.device), ('train_dir', args.data),
        ) if value is not None}
        cfg = cfg.replace(**overrides) if overrides else cfg
        configure_determinism(cfg.deterministic)
        return cfg

    def open_store(self, args, cfg: ExperimentConfig, record_config: bool = True) -> RunStore:
        return RunStore(args.out_dir, cfg.run_id).open(cfg, args.command, record_config=record_config)


def load_commands(cli: CommandLine, verbose: bool = False):
    """Load all command modules from the commands folder"""
    for name in commands_list:
        try:
            importlib.import_module(name).setup(cli)
            if verbose:
                print(f'Loaded command module: {name}', file=sys.stderr)
        except Exception:
            logger.exception('Failed to load command module %s', name)


def on_command_error(error: BaseException, command: Optional[str]) -> int:
    """Global error handler: one JSON object on stderr, exit code by error family"""
    if isinstance(error, DomProjError):
        payload = {'error': error.code, 'message': str(error), 'command': command}
        key = getattr(error, 'key', None)
        if key:
            payload['key'] = key
        last_good = getattr(error, 'last_good', None)
        if last_good:
            payload['last_good'] = str(last_good)
        status = 2
    else:
        payload = {'error': 'internal_error', 'message': f'{type(error).__name__}: {error}', 'command': command}
        logger.exception('Error in command %s', command)
        status = 1
    print(json.dumps(payload), file=sys.stderr)
    return status


def main(argv: Optional[List[str]] = None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    verbose = '-v' in argv or '--verbose' in argv
    setup_logging(logging.DEBUG if verbose else logging.INFO)
    cli = CommandLine()
    load_commands(cli, verbose)
    try:
        args = cli.parser.parse_args(argv)
    except ArgumentError as e:
        return on_command_error(e, next((a for a in argv if a in cli.subparsers.choices), None))
    except SystemExit as e:
        # --help
        return e.code if isinstance(e.code, int) else 0

    try:
        args.handler(args)
    except KeyboardInterrupt:
        print(json.dumps({'error': 'interrupted', 'message': 'interrupted', 'command': args.command}),
              file=sys.stderr)
        return 130
    except Exception as e:
        return on_command_error(e, args.command)
    return 0


if __name__ == '__main__':
    sys.exit(main())
