"""Test-time inference: domain-projection TTA, baseline TTA, evaluation, sweeps and timing.

Translation TTA draws S latent codes per image, maps them to one style per source
domain, translates the image with each style, classifies every translation and scores
it with the discriminator head of the domain it was projected into. The S predictions
are then combined by one of the ensembling strategies.
"""

import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import matplotlib

matplotlib.use('Agg')
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np
import pandas as pd
import torch
import torch.nn as nn
import torch.nn.functional as F
from sklearn.metrics import accuracy_score, confusion_matrix, f1_score

from domproj import config as defaults
from domproj.augment import JitterMagnitudes, color_jitter, dihedral_views, he_jitter
from domproj.core import (
    ArgumentError, EnsembleConfig, EnsembleStrategy, ExperimentConfig, ValidationError, check_image_batch,
    torch_generator,
)
from domproj.data import DomainDataset
from domproj.ensemble import ensemble_batch
from domproj.storage import RunStore
from domproj.translation import TranslationModel, build_translation_model, map_latent, sample_latents, translate

logger = logging.getLogger(__name__)

BASELINE_MODES = ('geometric', 'color_jitter', 'he_jitter')
GEOMETRIC_VIEWS = defaults.GEOMETRIC_VIEWS


@dataclass
class TTAOutcome:
    probs: np.ndarray  # (N, C) final class probabilities
    weights: np.ndarray  # (N, V) weight of each member prediction
    method: str
    scores: Optional[np.ndarray] = None  # (N, S) discriminator logits, translation TTA only
    member_probs: Optional[np.ndarray] = None  # (N, V, C)

    @property
    def predictions(self) -> np.ndarray:
        return self.probs.argmax(axis=1)


@torch.no_grad()
def classify(classifier: nn.Module, x: torch.Tensor) -> np.ndarray:
    """Softmax probabilities as float64 numpy, (N, C)"""
    classifier.eval()
    return F.softmax(classifier(x).double(), dim=1).cpu().numpy()


def base_predict(x: torch.Tensor, classifier: nn.Module) -> TTAOutcome:
    probs = classify(classifier, x)
    return TTAOutcome(probs, np.ones((len(probs), 1)), 'base', member_probs=probs[:, None])


class TTAPredictor:
    """Projects images into every source domain and ensembles the classifier's predictions"""

    def __init__(self, translation: TranslationModel, classifier: nn.Module, draws_per_domain: int = 1):
        if draws_per_domain < 1:
            raise ArgumentError(f'draws_per_domain must be >= 1, got {draws_per_domain}')
        self.translation = translation.eval()
        self.classifier = classifier.eval()
        self.draws_per_domain = draws_per_domain
        self.num_domains = translation.num_domains
        self.translation_passes = 0

    @torch.no_grad()
    def project(self, x: torch.Tensor, generator: torch.Generator) -> Tuple[np.ndarray, np.ndarray]:
        """Member predictions (N, S, C) and discriminator scores (N, S) for one batch.

        Each draw uses one (S, N, latent_dim) normal sample; with several draws per
        domain the predictions and scores of a domain are averaged over its draws.
        """
        model = self.translation
        check_image_batch(x, model.generator.in_channels, model.resolution)
        self.translation_passes += 1
        n, num_domains = x.shape[0], self.num_domains
        probs, scores = 0.0, 0.0
        for _ in range(self.draws_per_domain):
            z = sample_latents(num_domains, n, model.latent_dim, generator, x.device)
            draw_probs, draw_scores = [], []
            for d in range(num_domains):
                x_d = translate(model.generator, x, map_latent(model.mapping, z[d], d))
                draw_probs.append(classify(self.classifier, x_d))
                # head d on the projection into domain d, same image the classifier saw
                draw_scores.append(model.discriminator(x_d)[:, d].double().cpu().numpy())
            probs = probs + np.stack(draw_probs, axis=1)
            scores = scores + np.stack(draw_scores, axis=1)
        return probs / self.draws_per_domain, scores / self.draws_per_domain

    def predict(self, x: torch.Tensor, ensemble_cfg: EnsembleConfig, generator: torch.Generator) -> TTAOutcome:
        ensemble_cfg.check_domains(self.num_domains)
        member_probs, scores = self.project(x, generator)
        probs, weights = ensemble_batch(member_probs, scores, ensemble_cfg)
        return TTAOutcome(probs, weights, ensemble_cfg.tag, scores, member_probs)


def tta_predict(x: torch.Tensor, translation: TranslationModel, classifier: nn.Module,
                ensemble_cfg: EnsembleConfig, generator: torch.Generator, draws_per_domain: int = 1) -> TTAOutcome:
    return TTAPredictor(translation, classifier, draws_per_domain).predict(x, ensemble_cfg, generator)


def baseline_tta_predict(x: torch.Tensor, classifier: nn.Module, mode: str, n_views: int,
                         generator: torch.Generator, magnitudes: Optional[JitterMagnitudes] = None,
                         he_alpha: float = 0.0, he_beta: float = 0.0) -> TTAOutcome:
    """Model-free TTA: the 8 dihedral views, or n_views random color / stain jitters, averaged"""
    if n_views < 1:
        raise ArgumentError(f'n_views must be >= 1, got {n_views}')
    if mode == 'geometric':
        views = dihedral_views(x)
    elif mode == 'color_jitter':
        magnitudes = magnitudes or JitterMagnitudes()
        views = [color_jitter(x, magnitudes, generator) for _ in range(n_views)]
    elif mode == 'he_jitter':
        views = [he_jitter(x, he_alpha, he_beta, generator) for _ in range(n_views)]
    else:
        raise ArgumentError(f'unknown baseline TTA mode {mode!r} (expected one of {", ".join(BASELINE_MODES)})')

    member_probs = np.stack([classify(classifier, view) for view in views], axis=1)
    weights = np.full(member_probs.shape[:2], 1.0 / len(views))
    return TTAOutcome(np.einsum('nv,nvc->nc', weights, member_probs), weights, f'tta_{mode}',
                      member_probs=member_probs)


##################################################################################
# Evaluation
##################################################################################

@dataclass
class EvalReport:
    accuracy: float
    weighted_f1: float
    per_class_f1: List[float]
    confusion: np.ndarray
    n_samples: int
    runtime_s: float = 0.0
    method: str = ''
    split: str = ''

    @property
    def images_per_s(self) -> float:
        return self.n_samples / self.runtime_s if self.runtime_s > 0 else float('nan')

    def metrics(self, include_runtime: bool = True) -> Dict[str, float]:
        """Flat metric dict; wall-clock fields are left out when include_runtime is False"""
        row = {'accuracy': self.accuracy, 'weighted_f1': self.weighted_f1}
        row.update({f'f1_class_{c}': value for c, value in enumerate(self.per_class_f1)})
        row['n_samples'] = self.n_samples
        if include_runtime:
            row.update({'runtime_s': self.runtime_s, 'images_per_s': self.images_per_s})
        return row


def evaluate_predictions(y_true: Sequence[int], y_pred: Sequence[int], num_classes: int,
                         runtime_s: float = 0.0, method: str = '', split: str = '') -> EvalReport:
    y_true, y_pred = np.asarray(y_true), np.asarray(y_pred)
    if y_true.shape != y_pred.shape:
        raise ArgumentError(f'{len(y_true)} labels but {len(y_pred)} predictions')
    if len(y_true) == 0:
        raise ArgumentError('cannot evaluate an empty split')
    labels = list(range(num_classes))
    return EvalReport(
        accuracy=float(accuracy_score(y_true, y_pred)),
        weighted_f1=float(f1_score(y_true, y_pred, labels=labels, average='weighted', zero_division=0)),
        per_class_f1=[float(v) for v in f1_score(y_true, y_pred, labels=labels, average=None, zero_division=0)],
        confusion=confusion_matrix(y_true, y_pred, labels=labels),
        n_samples=len(y_true), runtime_s=runtime_s, method=method, split=split)


@dataclass(frozen=True)
class MethodSpec:
    """One row of the comparison table: no TTA, a baseline TTA, or translation TTA with an ensembling strategy"""
    kind: str  # base | geometric | color_jitter | he_jitter | translation
    ensemble: Optional[EnsembleConfig] = None
    n_views: int = 8

    def __post_init__(self):
        if self.kind not in ('base', 'translation') + BASELINE_MODES:
            raise ArgumentError(f'unknown method {self.kind!r}')
        if self.kind == 'translation' and self.ensemble is None:
            raise ArgumentError('translation TTA needs an ensemble config')

    @property
    def name(self) -> str:
        if self.kind == 'base':
            return 'base'
        if self.kind == 'translation':
            return self.ensemble.tag
        return f'tta_{self.kind}'

    @classmethod
    def parse(cls, text: str, n_views: int = 8) -> 'MethodSpec':
        """'base', 'geometric', 'color_jitter', 'he_jitter', 'naive', 'top_k:<k>' or 'weighted:<T>'"""
        name, _, arg = text.partition(':')
        try:
            if name == EnsembleStrategy.TOP_K.value:
                return cls('translation', EnsembleConfig(EnsembleStrategy.TOP_K, k=int(arg)))
            if name == EnsembleStrategy.WEIGHTED.value:
                return cls('translation', EnsembleConfig(EnsembleStrategy.WEIGHTED, temperature=float(arg)))
        except ValueError:
            raise ArgumentError(f'bad method argument in {text!r}')
        if name == EnsembleStrategy.NAIVE.value:
            return cls('translation', EnsembleConfig())
        return cls(name, n_views=n_views)


def _batches(dataset: DomainDataset, batch_size: int):
    for start in range(0, len(dataset), batch_size):
        yield dataset.images[start:start + batch_size], dataset.labels[start:start + batch_size]


def predict_dataset(dataset: DomainDataset, method: MethodSpec, cfg: ExperimentConfig, classifier: nn.Module,
                    translation: Optional[TranslationModel] = None, seed: Optional[int] = None) -> np.ndarray:
    """Class probabilities (N, C) of every image of a split under one method"""
    seed = cfg.seed if seed is None else seed
    device = next(classifier.parameters()).device
    if method.kind == 'translation':
        if translation is None:
            raise ArgumentError('translation TTA needs a translation model')
        if translation.num_domains != cfg.num_domains:
            raise ValidationError(f'translation model has {translation.num_domains} domains, config says '
                                  f'{cfg.num_domains}', 'num_domains')
        predictor = TTAPredictor(translation, classifier, cfg.tta_draws_per_domain)
        generator = torch_generator(seed, 'latent')
    else:
        generator = torch_generator(seed, 'jitter')

    outputs = []
    for x, _ in _batches(dataset, cfg.eval_batch_size):
        x = x.to(device)
        if method.kind == 'base':
            outcome = base_predict(x, classifier)
        elif method.kind == 'translation':
            outcome = predictor.predict(x, method.ensemble, generator)
        else:
            outcome = baseline_tta_predict(x, classifier, method.kind, method.n_views, generator,
                                           JitterMagnitudes.from_config(cfg), cfg.he_jitter_alpha,
                                           cfg.he_jitter_beta)
        outputs.append(outcome.probs)
    return np.concatenate(outputs)


def evaluate(dataset: DomainDataset, method: MethodSpec, cfg: ExperimentConfig, classifier: nn.Module,
             translation: Optional[TranslationModel] = None, store: Optional[RunStore] = None,
             seed: Optional[int] = None, name: Optional[str] = None) -> EvalReport:
    """Accuracy, weighted F1, per-class F1 and confusion matrix of one method on one split.

    Results are recorded under `name` (default: the method name) when a store is given.
    """
    started = time.perf_counter()
    probs = predict_dataset(dataset, method, cfg, classifier, translation, seed)
    runtime = time.perf_counter() - started
    report = evaluate_predictions(dataset.labels.numpy(), probs.argmax(axis=1), dataset.num_classes, runtime,
                                  name or method.name, dataset.split.value)
    logger.info('%s on %s: accuracy %.4f, weighted F1 %.4f (%d images, %.1fs)', report.method, report.split,
                report.accuracy, report.weighted_f1, report.n_samples, runtime)
    if store is not None:
        record_report(store, report, dataset.class_names, seed)
    return report


def record_report(store: RunStore, report: EvalReport, class_names: List[str], seed: Optional[int] = None):
    # no wall-clock values in metrics.csv
    store.save_metrics(report.split, report.method, report.metrics(include_runtime=False), seed)
    store.save_timing(report.split, report.method, report.runtime_s, report.n_samples)
    store.save_confusion(report.split, report.method, report.confusion, class_names)


##################################################################################
# Sweeps over k and T
##################################################################################

@dataclass
class PredictionCache:
    """Per-image member predictions and scores of one translation pass over a split"""
    member_probs: np.ndarray  # (N, S, C)
    scores: np.ndarray  # (N, S)
    labels: np.ndarray  # (N,)
    split: str = ''
    num_classes: int = 0

    def __post_init__(self):
        if not self.num_classes:
            self.num_classes = self.member_probs.shape[2]

    @property
    def num_domains(self) -> int:
        return self.member_probs.shape[1]

    def evaluate(self, ensemble_cfg: EnsembleConfig) -> EvalReport:
        ensemble_cfg.check_domains(self.num_domains)
        probs, _ = ensemble_batch(self.member_probs, self.scores, ensemble_cfg)
        return evaluate_predictions(self.labels, probs.argmax(axis=1), self.num_classes,
                                    method=ensemble_cfg.tag, split=self.split)


def collect_tta_cache(predictor: TTAPredictor, dataset: DomainDataset, batch_size: int,
                      generator: torch.Generator) -> PredictionCache:
    device = next(predictor.classifier.parameters()).device
    probs, scores = [], []
    for x, _ in _batches(dataset, batch_size):
        p, s = predictor.project(x.to(device), generator)
        probs.append(p)
        scores.append(s)
    return PredictionCache(np.concatenate(probs), np.concatenate(scores), dataset.labels.numpy(),
                           dataset.split.value, dataset.num_classes)


def _sweep_config(param: str, value) -> EnsembleConfig:
    if param == 'k':
        if float(value) != int(value):
            raise ArgumentError(f'k must be an integer, got {value}')
        return EnsembleConfig(EnsembleStrategy.TOP_K, k=int(value))
    if param == 'T':
        return EnsembleConfig(EnsembleStrategy.WEIGHTED, temperature=float(value))
    raise ArgumentError(f'can only sweep k or T, got {param!r}')


def sweep(param: str, values: Sequence[float], cache: PredictionCache,
          store: Optional[RunStore] = None) -> pd.DataFrame:
    """Evaluate top-k over k or weighted ensembling over T on cached predictions"""
    if not values:
        raise ArgumentError('sweep needs at least one value')
    configs = [_sweep_config(param, value) for value in values]
    naive = cache.evaluate(EnsembleConfig())
    rows = []
    for value, ensemble_cfg in zip(values, configs):
        report = cache.evaluate(ensemble_cfg)
        rows.append({'param': param, 'value': value, 'method': ensemble_cfg.tag, 'accuracy': report.accuracy,
                     'weighted_f1': report.weighted_f1, 'naive_accuracy': naive.accuracy,
                     'naive_weighted_f1': naive.weighted_f1})
    table = pd.DataFrame(rows)
    if store is not None:
        name = f'sweep_{param}_{cache.split or "split"}'
        store.save_table(f'{name}.csv', table)
        plot_sweep(table, store.path(f'{name}.png'))
    return table


def plot_sweep(table: pd.DataFrame, path: Union[str, Path]) -> Path:
    param = table['param'].iloc[0]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(table['value'], table['accuracy'], marker='o', label='accuracy')
    ax.plot(table['value'], table['weighted_f1'], marker='s', label='weighted F1')
    ax.axhline(table['naive_accuracy'].iloc[0], color='gray', linestyle='--', label='naive accuracy')
    if param == 'T':
        ax.set_xscale('log')
    ax.set_xlabel(param)
    ax.set_ylabel('score')
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


##################################################################################
# Timing
##################################################################################

BENCHMARK_ROWS = {
    'none': 'No TTA',
    'geometric': 'Geometric TTA',
    'color_jitter': 'Color Jitter TTA',
    'he_jitter': 'H&E Color Jitter TTA',
    'translation': 'Translation TTA',
    'translation_light': 'Lighter translation TTA',
}


def benchmark_inference(methods: Sequence[str], batch_size: int, repetitions: int, cfg: ExperimentConfig,
                        classifier: nn.Module, translation: Optional[TranslationModel] = None,
                        warmup: int = 2) -> pd.DataFrame:
    """Median milliseconds per batch of each TTA method, single-threaded"""
    if repetitions < 1:
        raise ArgumentError(f'repetitions must be >= 1, got {repetitions}')
    if batch_size < 1:
        raise ArgumentError(f'batch_size must be >= 1, got {batch_size}')
    unknown = [m for m in methods if m not in BENCHMARK_ROWS]
    if unknown:
        raise ArgumentError(f'unknown benchmark method(s): {", ".join(unknown)}')

    device = next(classifier.parameters()).device
    noise = torch_generator(cfg.seed, 'data')
    x = (torch.rand((batch_size, cfg.num_channels, cfg.image_resolution, cfg.image_resolution),
                    generator=noise) * 2 - 1).to(device)
    magnitudes = JitterMagnitudes.from_config(cfg)

    translation_models = {}
    if any(m.startswith('translation') for m in methods):
        translation_models['translation'] = translation or build_translation_model(cfg)
        if 'translation_light' in methods:
            translation_models['translation_light'] = build_translation_model(cfg, max(1, cfg.generator_channels // 2))
        for model in translation_models.values():
            model.to(device).eval()

    def run(method: str, generator: torch.Generator):
        if method == 'none':
            return base_predict(x, classifier)
        if method in BASELINE_MODES:
            views = GEOMETRIC_VIEWS if method == 'geometric' else cfg.jitter_views
            return baseline_tta_predict(x, classifier, method, views, generator, magnitudes, cfg.he_jitter_alpha,
                                        cfg.he_jitter_beta)
        return tta_predict(x, translation_models[method], classifier, EnsembleConfig(), generator)

    previous_threads = torch.get_num_threads()
    torch.set_num_threads(1)
    rows = []
    try:
        for method in methods:
            generator = torch_generator(cfg.seed, 'latent')
            for _ in range(warmup):
                run(method, generator)
            timings = []
            for _ in range(repetitions):
                if device.type == 'cuda':
                    torch.cuda.synchronize(device)
                started = time.perf_counter()
                run(method, generator)
                if device.type == 'cuda':
                    torch.cuda.synchronize(device)
                timings.append((time.perf_counter() - started) * 1000)
            rows.append({'method': BENCHMARK_ROWS[method], 'median_ms': float(np.median(timings)),
                         'min_ms': float(np.min(timings)), 'max_ms': float(np.max(timings)),
                         'batch_size': batch_size, 'repetitions': repetitions})
            logger.info('%s: %.1f ms per batch of %d', BENCHMARK_ROWS[method], rows[-1]['median_ms'], batch_size)
    finally:
        torch.set_num_threads(previous_threads)
    return pd.DataFrame(rows)


##################################################################################
# Features
##################################################################################

@torch.no_grad()
def export_features(dataset: DomainDataset, classifier: nn.Module, cfg: ExperimentConfig,
                    translation: Optional[TranslationModel] = None, path: Optional[Union[str, Path]] = None,
                    seed: Optional[int] = None) -> pd.DataFrame:
    """Penultimate classifier features of every image, and of its S projections when a translation model is given"""
    seed = cfg.seed if seed is None else seed
    device = next(classifier.parameters()).device
    generator = torch_generator(seed, 'latent')
    classifier.eval()
    frames = []
    offset = 0
    for x, labels in _batches(dataset, cfg.eval_batch_size):
        x = x.to(device)
        n = x.shape[0]
        domains = dataset.domains[offset:offset + n].numpy()
        meta = {'sample': np.arange(offset, offset + n), 'label': labels.numpy(), 'domain': domains}
        views = [(False, -1, x)]
        if translation is not None:
            z = sample_latents(translation.num_domains, n, translation.latent_dim, generator, device)
            views += [(True, d, translate(translation.generator, x, map_latent(translation.mapping, z[d], d)))
                      for d in range(translation.num_domains)]
        for projected, target, images in views:
            features = classifier.features(images).flatten(1).double().cpu().numpy()
            frame = pd.DataFrame(features, columns=[f'f_{i}' for i in range(features.shape[1])])
            frame.insert(0, 'target_domain', target)
            frame.insert(0, 'projected', projected)
            for key in ('domain', 'label', 'sample'):
                frame.insert(0, key, meta[key])
            frames.append(frame)
        offset += n
    table = pd.concat(frames, ignore_index=True).sort_values(['sample', 'target_domain'], kind='stable')
    table = table.reset_index(drop=True)
    if path is not None:
        table.to_csv(path, index=False)
        logger.info('Wrote %d feature rows to %s', len(table), path)
    return table
