"""Run directories: checkpoints, metric tables and JSON metadata."""

import json
import logging
import re
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import numpy as np
import pandas as pd
import torch

from domproj import config as defaults
from domproj.core import (
    ARCHITECTURE_KEYS, CheckpointIncompatibleError, CheckpointNotFoundError, DataError, ExperimentConfig,
    RunInfo, config_hash, dump_config,
)

logger = logging.getLogger(__name__)

METRIC_COLUMNS = ['run_id', 'seed', 'split', 'method', 'metric_name', 'value']
_STEP_DIR = re.compile(r'^step_(\d+)$')


@dataclass
class Checkpoint:
    """Weights of one trained component group plus what is needed to resume training"""
    kind: str  # 'translation' or 'classifier'
    step: int
    seed: int
    config_hash: str
    modules: Dict[str, Dict[str, torch.Tensor]]
    trainer_state: Optional[Dict[str, Any]] = None
    config: Dict[str, Any] = field(default_factory=dict)


def save_checkpoint(checkpoint: Checkpoint, path: Union[str, Path]) -> Path:
    """One torch.save blob per component and a meta.json sidecar"""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    for name, state in checkpoint.modules.items():
        torch.save(state, path / f'{name}.pt')
    if checkpoint.trainer_state is not None:
        torch.save(checkpoint.trainer_state, path / 'trainer.pt')
    meta = {
        'kind': checkpoint.kind,
        'step': checkpoint.step,
        'seed': checkpoint.seed,
        'config_hash': checkpoint.config_hash,
        'components': sorted(checkpoint.modules),
        'config': checkpoint.config,
    }
    (path / 'meta.json').write_text(json.dumps(meta, indent=2, sort_keys=True), encoding='utf-8')
    logger.debug('Saved %s checkpoint at step %d to %s', checkpoint.kind, checkpoint.step, path)
    return path


def _architecture_diff(saved: Dict[str, Any], cfg: ExperimentConfig) -> List[str]:
    return [f'{key}: {saved[key]!r} != {getattr(cfg, key)!r}'
            for key in ARCHITECTURE_KEYS if key in saved and saved[key] != getattr(cfg, key)]


def load_checkpoint(path: Union[str, Path], cfg: Optional[ExperimentConfig] = None,
                    kind: Optional[str] = None) -> Checkpoint:
    """Load a checkpoint directory; with cfg given, refuse one built for other network shapes"""
    path = resolve_checkpoint(path, kind)
    meta = json.loads((path / 'meta.json').read_text(encoding='utf-8'))
    if kind is not None and meta['kind'] != kind:
        raise CheckpointIncompatibleError(f'{path} holds a {meta["kind"]} checkpoint, expected {kind}')
    if cfg is not None and meta['config_hash'] != config_hash(cfg):
        diff = _architecture_diff(meta.get('config', {}), cfg)
        raise CheckpointIncompatibleError(
            f'checkpoint {path} was built for a different architecture'
            + (f' ({"; ".join(diff)})' if diff else f' (hash {meta["config_hash"]} != {config_hash(cfg)})'))

    modules = {}
    for name in meta['components']:
        blob = path / f'{name}.pt'
        if not blob.is_file():
            raise CheckpointNotFoundError(f'checkpoint component missing: {blob}')
        modules[name] = torch.load(blob, map_location='cpu', weights_only=True)
    trainer_file = path / 'trainer.pt'
    trainer_state = torch.load(trainer_file, map_location='cpu', weights_only=True) if trainer_file.is_file() else None
    return Checkpoint(meta['kind'], meta['step'], meta['seed'], meta['config_hash'], modules, trainer_state,
                      meta.get('config', {}))


def list_checkpoints(root: Union[str, Path]) -> List[Path]:
    """step_<n> directories under root, ordered by step"""
    root = Path(root)
    if not root.is_dir():
        return []
    found = [(int(m.group(1)), p) for p in root.iterdir() if (m := _STEP_DIR.match(p.name)) and p.is_dir()]
    return [p for _, p in sorted(found)]


def resolve_checkpoint(path: Union[str, Path], kind: Optional[str] = None) -> Path:
    """Accept a checkpoint dir, a dir of step_<n> checkpoints or a run dir (latest step wins)"""
    path = Path(path)
    if (path / 'meta.json').is_file():
        return path
    candidates = [path / kind, path] if kind else [path]
    for candidate in candidates:
        steps = list_checkpoints(candidate)
        if steps:
            return steps[-1]
    raise CheckpointNotFoundError(f'no checkpoint found at {path}')


class RunStore:
    def __init__(self, out_dir: Union[str, Path, None], run_id: str):
        self.out_dir = Path(out_dir or defaults.RUNS_DIR)
        self.run_id = run_id
        self.root = self.out_dir / run_id
        self.info: Optional[RunInfo] = None

    def open(self, cfg: ExperimentConfig, command: str, record_config: bool = True, **extra) -> 'RunStore':
        """Create the run directory and record config and metadata"""
        self.root.mkdir(parents=True, exist_ok=True)
        if record_config:
            (self.root / 'config.yaml').write_text(dump_config(cfg), encoding='utf-8')
        self.info = RunInfo(cfg.run_id, cfg.seed, command, config_hash(cfg), extra)
        meta = self.get_metadata() or {}
        meta.update({
            'run_id': cfg.run_id,
            'seed': cfg.seed,
            'config_hash': self.info.config_hash,
            'command': command,
            'started_at': _now(),
            **extra,
        })
        meta.setdefault('commands', []).append(command)
        self.save_metadata(meta)
        logger.info('Run directory: %s', self.root)
        return self

    def close(self):
        meta = self.get_metadata() or {}
        meta['finished_at'] = _now()
        self.save_metadata(meta)

    def path(self, *parts: str) -> Path:
        target = self.root.joinpath(*parts)
        target.parent.mkdir(parents=True, exist_ok=True)
        return target

    # Metadata
    def save_metadata(self, data: Dict[str, Any]):
        self.path('metadata.json').write_text(json.dumps(data, indent=2, sort_keys=True, default=str),
                                              encoding='utf-8')

    def get_metadata(self) -> Optional[Dict[str, Any]]:
        meta = self.root / 'metadata.json'
        return json.loads(meta.read_text(encoding='utf-8')) if meta.is_file() else None

    def save_json(self, name: str, data: Dict[str, Any]) -> Path:
        target = self.path(name)
        target.write_text(json.dumps(data, indent=2, sort_keys=True), encoding='utf-8')
        return target

    def get_json(self, name: str) -> Optional[Dict[str, Any]]:
        target = self.root / name
        return json.loads(target.read_text(encoding='utf-8')) if target.is_file() else None

    # Metrics
    def save_metrics(self, split: str, method: str, metrics: Dict[str, float], seed: Optional[int] = None):
        """Append one row per metric to metrics.csv"""
        seed = self.info.seed if seed is None and self.info else seed
        rows = pd.DataFrame([{'run_id': self.run_id, 'seed': seed, 'split': split, 'method': method,
                              'metric_name': name, 'value': float(value)} for name, value in metrics.items()],
                            columns=METRIC_COLUMNS)
        self._append_csv('metrics.csv', rows)

    def get_metrics(self) -> pd.DataFrame:
        return self._read_csv('metrics.csv', METRIC_COLUMNS)

    def save_timing(self, split: str, method: str, runtime_s: float, n_samples: int):
        self._append_csv('timings.csv', pd.DataFrame([{
            'run_id': self.run_id, 'split': split, 'method': method, 'runtime_s': runtime_s,
            'images_per_s': n_samples / runtime_s if runtime_s > 0 else float('nan'),
        }]))

    def save_loss_log(self, kind: str, rows: List[Dict[str, float]]):
        if rows:
            frame = pd.DataFrame(rows)
            frame.insert(0, 'kind', kind)
            self._append_csv('loss_log.csv', frame)

    def get_loss_log(self) -> pd.DataFrame:
        return self._read_csv('loss_log.csv')

    def save_confusion(self, split: str, method: str, matrix: np.ndarray, class_names: List[str]) -> Path:
        target = self.path(f'confusion_{split}_{method}.csv')
        pd.DataFrame(matrix, index=class_names, columns=class_names).to_csv(target)
        return target

    def get_confusion(self, split: str, method: str) -> pd.DataFrame:
        target = self.root / f'confusion_{split}_{method}.csv'
        if not target.is_file():
            raise DataError(f'no confusion matrix for {split}/{method} in {self.root}')
        return pd.read_csv(target, index_col=0)

    def save_table(self, name: str, frame: pd.DataFrame) -> Path:
        target = self.path(name)
        frame.to_csv(target, index=False)
        return target

    def get_table(self, name: str) -> pd.DataFrame:
        return self._read_csv(name)

    # Checkpoints
    def checkpoint_dir(self, kind: str, step: int) -> Path:
        return self.root / kind / f'step_{step}'

    def latest_checkpoint(self, kind: str) -> Optional[Path]:
        steps = list_checkpoints(self.root / kind)
        return steps[-1] if steps else None

    def require_checkpoint(self, kind: str, explicit: Optional[Union[str, Path]] = None) -> Path:
        """An explicitly given checkpoint, else the run's latest one of that kind"""
        if explicit is not None:
            return resolve_checkpoint(explicit, kind)
        latest = self.latest_checkpoint(kind)
        if latest is None:
            raise CheckpointNotFoundError(f'no {kind} checkpoint in {self.root}; train one first or pass its path')
        return latest

    def _append_csv(self, name: str, frame: pd.DataFrame):
        target = self.path(name)
        frame.to_csv(target, mode='a', header=not target.is_file(), index=False)

    def _read_csv(self, name: str, columns: Optional[List[str]] = None) -> pd.DataFrame:
        target = self.root / name
        if not target.is_file():
            return pd.DataFrame(columns=columns)
        return pd.read_csv(target)


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec='seconds')
