"""Shared types, configuration schema, errors and seed streams."""

from __future__ import annotations

import dataclasses
import enum
import hashlib
import json
import os
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Sequence, Union

import numpy as np
import torch
import yaml

from domproj import config as defaults


# ---------------------------------------------------------------------------
# Errors
# ---------------------------------------------------------------------------

class DomProjError(Exception):
    """Base class for every error raised by the library"""
    code = 'error'


class ConfigError(DomProjError):
    code = 'config_error'

    def __init__(self, message: str, key: Optional[str] = None):
        super().__init__(message)
        self.key = key


class ValidationError(ConfigError):
    code = 'validation_error'


class ArgumentError(DomProjError, ValueError):
    code = 'argument_error'


class ShapeError(DomProjError, ValueError):
    code = 'shape_error'


class DomainIndexError(DomProjError, IndexError):
    code = 'domain_error'


class CheckpointNotFoundError(DomProjError, FileNotFoundError):
    code = 'not_found'


class CheckpointIncompatibleError(DomProjError):
    code = 'incompatible_checkpoint'


class DataError(DomProjError):
    code = 'data_error'


class NumericalError(DomProjError, ArithmeticError):
    code = 'numerical_error'


class DivergenceError(NumericalError):
    code = 'divergence'

    def __init__(self, message: str, last_good: Optional[Path] = None):
        super().__init__(message)
        self.last_good = last_good


# ---------------------------------------------------------------------------
# Value types
# ---------------------------------------------------------------------------

# (N, C, H, W) float tensor with values in [-1, 1]
ImageBatch = torch.Tensor
# (N, latent_dim) standard normal draws
LatentCode = torch.Tensor
# (N, style_dim)
StyleVector = torch.Tensor
# (num_classes,) probabilities, one row per image when batched
ClassProbVector = np.ndarray
# (S,) raw discriminator logits, entry i scores the projection into domain i
DomainScoreVector = np.ndarray


@dataclass(frozen=True)
class DomainLabel:
    index: int
    num_domains: int

    def __post_init__(self):
        if self.num_domains < 2:
            raise ValidationError(f'need at least 2 source domains, got {self.num_domains}', 'num_domains')
        if not 0 <= self.index < self.num_domains:
            raise DomainIndexError(f'domain index {self.index} outside [0, {self.num_domains})')

    def __int__(self) -> int:
        return self.index


class EnsembleStrategy(str, enum.Enum):
    NAIVE = 'naive'
    TOP_K = 'top_k'
    WEIGHTED = 'weighted'


@dataclass(frozen=True)
class EnsembleConfig:
    """How per-domain predictions are combined into one."""
    strategy: EnsembleStrategy = EnsembleStrategy.NAIVE
    k: Optional[int] = None
    temperature: Optional[float] = None

    def __post_init__(self):
        try:
            object.__setattr__(self, 'strategy', EnsembleStrategy(self.strategy))
        except ValueError:
            raise ValidationError(f'unknown ensemble strategy {self.strategy!r}', 'ensemble_strategy')

        if self.strategy is EnsembleStrategy.TOP_K:
            if self.k is None:
                raise ValidationError('top_k ensembling needs k', 'ensemble_k')
            if self.k < 1:
                raise ValidationError(f'k must be >= 1, got {self.k}', 'ensemble_k')
        elif self.k is not None:
            raise ValidationError(f'k is only used by top_k ensembling (strategy={self.strategy.value})', 'ensemble_k')

        if self.strategy is EnsembleStrategy.WEIGHTED:
            if self.temperature is None:
                raise ValidationError('weighted ensembling needs a temperature', 'ensemble_temperature')
            if not self.temperature > 0 or not np.isfinite(self.temperature):
                raise ValidationError(f'temperature must be positive, got {self.temperature}', 'ensemble_temperature')
        elif self.temperature is not None:
            raise ValidationError(
                f'temperature is only used by weighted ensembling (strategy={self.strategy.value})',
                'ensemble_temperature')

    def check_domains(self, num_domains: int):
        """Reject a k that does not fit the number of source domains"""
        if self.k is not None and self.k > num_domains:
            raise ValidationError(f'k={self.k} exceeds the number of source domains S={num_domains}', 'ensemble_k')

    @property
    def tag(self) -> str:
        if self.strategy is EnsembleStrategy.TOP_K:
            return f'tta_top_k{self.k}'
        if self.strategy is EnsembleStrategy.WEIGHTED:
            return f'tta_weighted_T{self.temperature:g}'
        return 'tta_naive'


# ---------------------------------------------------------------------------
# Experiment configuration
# ---------------------------------------------------------------------------

CLASSIFIER_ARCHS = ('resnet_small', 'resnet18', 'densenet121')
PERCEPTUAL_EXTRACTORS = ('random_conv', 'vgg16')
AUGMENTATION_MODES = ('none', 'stargan', 'color_jitter', 'he_jitter', 'geometric')
DOMAIN_KEYS = ('subfolder', 'metadata_column')

# Keys that change network shapes; a checkpoint is only loadable under the same values
ARCHITECTURE_KEYS = (
    'image_resolution', 'num_channels', 'num_domains', 'num_classes', 'style_dim',
    'latent_dim', 'generator_channels', 'encoder_channels', 'max_channels',
    'num_res_blocks', 'mapping_hidden', 'classifier_arch',
)


@dataclass(frozen=True)
class ExperimentConfig:
    run_id: str = 'default'
    seed: int = 0

    image_resolution: int = defaults.IMAGE_RESOLUTION
    num_channels: int = defaults.NUM_CHANNELS
    num_domains: int = defaults.NUM_DOMAINS
    num_classes: int = defaults.NUM_CLASSES

    style_dim: int = defaults.STYLE_DIM
    latent_dim: int = defaults.LATENT_DIM
    generator_channels: int = defaults.GENERATOR_CHANNELS
    encoder_channels: int = defaults.ENCODER_CHANNELS
    max_channels: int = defaults.MAX_CHANNELS
    num_res_blocks: int = defaults.NUM_RES_BLOCKS
    mapping_hidden: int = defaults.MAPPING_HIDDEN

    lambda_adv: float = defaults.LAMBDA_ADV
    lambda_cyc: float = defaults.LAMBDA_CYC
    lambda_ds: float = defaults.LAMBDA_DS
    lambda_percep: float = defaults.LAMBDA_PERCEP
    lambda_sty: float = defaults.LAMBDA_STY
    lambda_gp: float = defaults.LAMBDA_GP
    ds_decay: bool = False
    ds_decay_steps: int = defaults.DS_DECAY_STEPS

    learning_rate: float = defaults.LEARNING_RATE
    beta1: float = defaults.BETA1
    beta2: float = defaults.BETA2
    translation_batch_size: int = defaults.TRANSLATION_BATCH_SIZE
    translation_steps: int = defaults.TRANSLATION_STEPS
    classifier_batch_size: int = defaults.CLASSIFIER_BATCH_SIZE
    classifier_steps: int = defaults.CLASSIFIER_STEPS
    classifier_lr: float = defaults.LEARNING_RATE
    classifier_arch: str = 'resnet_small'
    perceptual_extractor: str = 'random_conv'
    use_ema: bool = True
    ema_beta: float = defaults.EMA_BETA

    augmentation_mode: str = 'none'
    p_aug: float = defaults.P_AUG

    ensemble_strategy: str = 'naive'
    ensemble_k: Optional[int] = None
    ensemble_temperature: Optional[float] = None
    tta_draws_per_domain: int = 1

    jitter_views: int = defaults.JITTER_VIEWS
    jitter_brightness: float = defaults.JITTER_BRIGHTNESS
    jitter_contrast: float = defaults.JITTER_CONTRAST
    jitter_saturation: float = defaults.JITTER_SATURATION
    jitter_hue: float = defaults.JITTER_HUE
    he_jitter_alpha: float = defaults.HE_JITTER_ALPHA
    he_jitter_beta: float = defaults.HE_JITTER_BETA

    log_every: int = defaults.LOG_EVERY
    checkpoint_every: int = defaults.CHECKPOINT_EVERY
    eval_batch_size: int = defaults.EVAL_BATCH_SIZE

    train_dir: Optional[str] = None
    domain_key: str = 'subfolder'
    metadata_path: Optional[str] = None

    device: str = defaults.DEVICE
    deterministic: bool = True

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.num_domains < 2:
            raise ValidationError(f'num_domains must be >= 2, got {self.num_domains}', 'num_domains')
        if self.num_classes < 2:
            raise ValidationError(f'num_classes must be >= 2, got {self.num_classes}', 'num_classes')
        if self.image_resolution <= 0 or self.image_resolution % 8:
            raise ValidationError(
                f'image_resolution must be a positive multiple of 8, got {self.image_resolution}',
                'image_resolution')

        for key in ('style_dim', 'latent_dim', 'generator_channels', 'encoder_channels', 'max_channels',
                    'mapping_hidden', 'num_channels', 'translation_batch_size', 'translation_steps',
                    'classifier_batch_size', 'classifier_steps', 'tta_draws_per_domain', 'jitter_views',
                    'log_every', 'checkpoint_every', 'eval_batch_size', 'ds_decay_steps'):
            if getattr(self, key) <= 0:
                raise ValidationError(f'{key} must be > 0, got {getattr(self, key)}', key)
        if self.num_res_blocks < 0:
            raise ValidationError(f'num_res_blocks must be >= 0, got {self.num_res_blocks}', 'num_res_blocks')

        for key, value in self.loss_weights().items():
            if value < 0:
                raise ValidationError(f'{key} must be >= 0, got {value}', key)

        for key in ('learning_rate', 'classifier_lr'):
            if getattr(self, key) <= 0:
                raise ValidationError(f'{key} must be > 0, got {getattr(self, key)}', key)
        for key in ('beta1', 'beta2', 'ema_beta', 'p_aug'):
            if not 0.0 <= getattr(self, key) <= 1.0:
                raise ValidationError(f'{key} must lie in [0, 1], got {getattr(self, key)}', key)
        for key in ('jitter_brightness', 'jitter_contrast', 'jitter_saturation', 'he_jitter_alpha', 'he_jitter_beta'):
            if getattr(self, key) < 0:
                raise ValidationError(f'{key} must be >= 0, got {getattr(self, key)}', key)
        if not 0.0 <= self.jitter_hue <= 0.5:
            raise ValidationError(f'jitter_hue must lie in [0, 0.5], got {self.jitter_hue}', 'jitter_hue')

        _check_choice('classifier_arch', self.classifier_arch, CLASSIFIER_ARCHS)
        _check_choice('perceptual_extractor', self.perceptual_extractor, PERCEPTUAL_EXTRACTORS)
        _check_choice('augmentation_mode', self.augmentation_mode, AUGMENTATION_MODES)
        _check_choice('domain_key', self.domain_key, DOMAIN_KEYS)

        self.ensemble.check_domains(self.num_domains)

    @property
    def ensemble(self) -> EnsembleConfig:
        return EnsembleConfig(self.ensemble_strategy, self.ensemble_k, self.ensemble_temperature)

    def loss_weights(self) -> Dict[str, float]:
        return {key: getattr(self, key) for key in
                ('lambda_adv', 'lambda_cyc', 'lambda_ds', 'lambda_percep', 'lambda_sty', 'lambda_gp')}

    def replace(self, **changes) -> 'ExperimentConfig':
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)


def _check_choice(key: str, value: str, choices: Sequence[str]):
    if value not in choices:
        raise ValidationError(f'{key} must be one of {", ".join(choices)}, got {value!r}', key)


_FIELD_TYPES = typing.get_type_hints(ExperimentConfig)


def _coerce(key: str, value: Any) -> Any:
    """Check one raw YAML value against the declared field type"""
    expected = _FIELD_TYPES[key]
    optional = typing.get_origin(expected) is Union and type(None) in typing.get_args(expected)
    if optional:
        if value is None:
            return None
        expected = next(arg for arg in typing.get_args(expected) if arg is not type(None))

    if expected is bool:
        if isinstance(value, bool):
            return value
    elif expected is int:
        if isinstance(value, int) and not isinstance(value, bool):
            return value
    elif expected is float:
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
    elif expected is str:
        if isinstance(value, str):
            return value
        if isinstance(value, (int, float)) and key == 'run_id':
            return str(value)

    raise ConfigError(f'config key {key!r} expects {expected.__name__}, got {value!r}', key)


def config_from_dict(raw: Dict[str, Any]) -> ExperimentConfig:
    values = {}
    for key, value in raw.items():
        if key not in _FIELD_TYPES:
            raise ConfigError(f'unknown config key {key!r}', key)
        values[key] = _coerce(key, value)
    return ExperimentConfig(**values)


def parse_config(text: str) -> ExperimentConfig:
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise ConfigError(f'config is not valid YAML: {e}')
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError('config must be a flat mapping of key: value pairs')
    for key, value in raw.items():
        if isinstance(value, (dict, list)):
            raise ConfigError(f'config key {key!r} must hold a scalar, configs are flat', str(key))
    return config_from_dict(raw)


def load_config(path: Union[str, Path]) -> ExperimentConfig:
    """Read a flat YAML config file, filling absent keys with defaults"""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f'config file not found: {path}')
    return parse_config(path.read_text(encoding='utf-8'))


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=True)


def config_hash(cfg: ExperimentConfig) -> str:
    """Hash of the keys that decide network shapes"""
    payload = {key: getattr(cfg, key) for key in ARCHITECTURE_KEYS}
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode('utf-8')).hexdigest()[:16]


# ---------------------------------------------------------------------------
# Seeds and determinism
# ---------------------------------------------------------------------------

# Fixed order, so adding a name at the end never shifts existing streams
SEED_COMPONENTS = ('init', 'data', 'latent', 'augment', 'synthetic', 'jitter')


def seed_streams(seed: int) -> Dict[str, int]:
    """Derive one independent 63-bit seed per component from the master seed"""
    children = np.random.SeedSequence(seed).spawn(len(SEED_COMPONENTS))
    return {name: int(child.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))
            for name, child in zip(SEED_COMPONENTS, children)}


def component_seed(seed: int, name: str) -> int:
    if name not in SEED_COMPONENTS:
        raise ArgumentError(f'unknown seed component {name!r}')
    return seed_streams(seed)[name]


def torch_generator(seed: int, name: str, device: Union[str, torch.device] = 'cpu') -> torch.Generator:
    generator = torch.Generator(device=device)
    generator.manual_seed(component_seed(seed, name))
    return generator


def numpy_generator(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng(component_seed(seed, name))


def configure_determinism(enabled: bool = True):
    if enabled:
        os.environ.setdefault('CUBLAS_WORKSPACE_CONFIG', ':4096:8')
    torch.use_deterministic_algorithms(enabled, warn_only=True)
    torch.backends.cudnn.benchmark = not enabled


def resolve_device(name: str) -> torch.device:
    if name.startswith('cuda') and not torch.cuda.is_available():
        raise ConfigError(f'device {name!r} requested but CUDA is not available', 'device')
    return torch.device(name)


# ---------------------------------------------------------------------------
# Validation helpers shared by the numeric modules
# ---------------------------------------------------------------------------

def check_domain(d: Union[int, DomainLabel, torch.Tensor], num_domains: int, batch_size: int,
                 device: Union[str, torch.device] = 'cpu') -> torch.Tensor:
    """Normalise a domain label argument into a (batch_size,) long tensor"""
    if isinstance(d, DomainLabel):
        d = d.index
    if isinstance(d, (int, np.integer)):
        if not 0 <= int(d) < num_domains:
            raise DomainIndexError(f'domain index {int(d)} outside [0, {num_domains})')
        return torch.full((batch_size,), int(d), dtype=torch.long, device=device)

    d = torch.as_tensor(d, device=device)
    if d.dtype.is_floating_point or d.dim() != 1 or d.shape[0] != batch_size:
        raise ShapeError(f'domain labels must be an integer tensor of shape ({batch_size},), got {tuple(d.shape)}')
    if d.numel() and (int(d.min()) < 0 or int(d.max()) >= num_domains):
        raise DomainIndexError(f'domain labels must lie in [0, {num_domains})')
    return d.long()


def check_image_batch(x: torch.Tensor, channels: Optional[int] = None, resolution: Optional[int] = None):
    if x.dim() != 4:
        raise ShapeError(f'expected an image batch (N, C, H, W), got shape {tuple(x.shape)}')
    if channels is not None and x.shape[1] != channels:
        raise ShapeError(f'expected {channels} channels, got {x.shape[1]}')
    if resolution is not None and tuple(x.shape[2:]) != (resolution, resolution):
        raise ShapeError(f'expected {resolution}x{resolution} images, got {x.shape[2]}x{x.shape[3]}')


def check_class_probs(p: np.ndarray, atol: float = 1e-6) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.ndim == 0 or not np.all(np.isfinite(p)):
        raise ArgumentError('class probabilities must be a finite vector')
    if np.any(p < 0):
        raise ArgumentError('class probabilities must be non-negative')
    if not np.allclose(p.sum(axis=-1), 1.0, atol=atol, rtol=0):
        raise ArgumentError('class probabilities must sum to 1')
    return p


@dataclass
class RunInfo:
    """Metadata written next to every run's outputs"""
    run_id: str
    seed: int
    command: str
    config_hash: str
    extra: Dict[str, Any] = field(default_factory=dict)
