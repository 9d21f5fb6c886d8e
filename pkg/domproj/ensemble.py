"""Ensembling of per-domain predictions.

Given S class-probability vectors (one per projection of a test image into a source
domain) and the S discriminator logits scoring those projections, combine them into a
single prediction by plain averaging, by averaging the k best-scored projections, or by
weighting every projection with a softmax over its score.

Everything here is plain numpy and side-effect free.
"""

from dataclasses import dataclass
from typing import FrozenSet, Sequence, Tuple

import numpy as np

from domproj.core import ArgumentError, EnsembleConfig, EnsembleStrategy, ShapeError, check_class_probs


@dataclass(frozen=True)
class EnsembleResult:
    y_hat: np.ndarray  # (C,)
    weights: np.ndarray  # (S,), zero for discarded members
    selected: FrozenSet[int]


def _stack_predictions(predictions: Sequence[np.ndarray]) -> np.ndarray:
    if len(predictions) == 0:
        raise ArgumentError('need at least one prediction to ensemble')
    lengths = {np.shape(p) for p in predictions}
    if len(lengths) != 1:
        raise ShapeError(f'predictions have different shapes: {sorted(lengths)}')
    stacked = np.asarray(predictions, dtype=np.float64)
    if stacked.ndim != 2:
        raise ShapeError(f'each prediction must be a vector, got shape {stacked.shape[1:]}')
    return check_class_probs(stacked)


def _check_scores(scores: np.ndarray, num_members: int) -> np.ndarray:
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape != (num_members,):
        raise ShapeError(f'expected {num_members} domain scores, got shape {scores.shape}')
    if not np.all(np.isfinite(scores)):
        raise ArgumentError('domain scores must be finite')
    return scores


def _combine(predictions: np.ndarray, weights: np.ndarray, selected) -> EnsembleResult:
    return EnsembleResult(y_hat=weights @ predictions, weights=weights, selected=frozenset(int(i) for i in selected))


def naive_ensemble(predictions: Sequence[np.ndarray]) -> EnsembleResult:
    """Uniform average of all predictions; scores are not needed"""
    predictions = _stack_predictions(predictions)
    num_members = predictions.shape[0]
    weights = np.full(num_members, 1.0 / num_members)
    return _combine(predictions, weights, range(num_members))


def top_k_indices(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest scores, ties resolved towards the lower index.

    Taking the k largest entries maximises the score sum over all size-k subsets.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if not 1 <= k <= scores.shape[-1]:
        raise ArgumentError(f'k must lie in [1, {scores.shape[-1]}], got {k}')
    order = np.argsort(-scores, axis=-1, kind='stable')
    return order[..., :k]


def topk_ensemble(predictions: Sequence[np.ndarray], scores: np.ndarray, k: int) -> EnsembleResult:
    """Average the k predictions whose projections got the highest discriminator scores"""
    predictions = _stack_predictions(predictions)
    num_members = predictions.shape[0]
    scores = _check_scores(scores, num_members)
    if not isinstance(k, (int, np.integer)) or not 1 <= k <= num_members:
        raise ArgumentError(f'k must be an integer in [1, {num_members}], got {k!r}')

    selected = top_k_indices(scores, int(k))
    weights = np.zeros(num_members)
    weights[selected] = 1.0 / k
    return _combine(predictions, weights, selected)


def softmax_weights(scores: np.ndarray, temperature: float) -> np.ndarray:
    """softmax(scores / temperature), computed with max-subtraction.

    Stable for |score| up to at least 1e4 at any positive temperature.
    """
    if not np.isfinite(temperature) or temperature <= 0:
        raise ArgumentError(f'temperature must be a positive real, got {temperature}')
    scores = np.asarray(scores, dtype=np.float64)
    if not np.all(np.isfinite(scores)):
        raise ArgumentError('domain scores must be finite')

    scaled = (scores - scores.max(axis=-1, keepdims=True)) / temperature
    exp = np.exp(scaled)
    return exp / exp.sum(axis=-1, keepdims=True)


def softmax_jacobian(scores: np.ndarray, temperature: float) -> np.ndarray:
    """d weights_i / d scores_j = w_i (delta_ij - w_j) / T"""
    w = softmax_weights(scores, temperature)
    return (np.diag(w) - np.outer(w, w)) / temperature


def weighted_ensemble(predictions: Sequence[np.ndarray], scores: np.ndarray, temperature: float) -> EnsembleResult:
    """Weight every prediction by the softmax of its projection's score"""
    predictions = _stack_predictions(predictions)
    num_members = predictions.shape[0]
    scores = _check_scores(scores, num_members)
    weights = softmax_weights(scores, temperature)
    return _combine(predictions, weights, range(num_members))


def ensemble(predictions: Sequence[np.ndarray], scores: np.ndarray, cfg: EnsembleConfig) -> EnsembleResult:
    if cfg.strategy is EnsembleStrategy.TOP_K:
        return topk_ensemble(predictions, scores, cfg.k)
    if cfg.strategy is EnsembleStrategy.WEIGHTED:
        return weighted_ensemble(predictions, scores, cfg.temperature)
    return naive_ensemble(predictions)


def ensemble_weights_batch(scores: np.ndarray, cfg: EnsembleConfig) -> np.ndarray:
    """Row-wise ensemble weights for a (N, S) score matrix"""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2:
        raise ShapeError(f'expected (N, S) scores, got shape {scores.shape}')
    num_images, num_members = scores.shape

    if cfg.strategy is EnsembleStrategy.WEIGHTED:
        return softmax_weights(scores, cfg.temperature)
    if cfg.strategy is EnsembleStrategy.TOP_K:
        cfg.check_domains(num_members)
        weights = np.zeros_like(scores)
        selected = top_k_indices(scores, cfg.k)
        np.put_along_axis(weights, selected, 1.0 / cfg.k, axis=-1)
        return weights
    return np.full((num_images, num_members), 1.0 / num_members)


def ensemble_batch(predictions: np.ndarray, scores: np.ndarray, cfg: EnsembleConfig) -> Tuple[np.ndarray, np.ndarray]:
    """Ensemble a batch: predictions (N, S, C), scores (N, S) -> (y_hat (N, C), weights (N, S))"""
    predictions = np.asarray(predictions, dtype=np.float64)
    if predictions.ndim != 3:
        raise ShapeError(f'expected (N, S, C) predictions, got shape {predictions.shape}')
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape != predictions.shape[:2]:
        raise ShapeError(f'scores shape {scores.shape} does not match predictions {predictions.shape[:2]}')
    if not np.all(np.isfinite(scores)):
        raise ArgumentError('domain scores must be finite')

    weights = ensemble_weights_batch(scores, cfg)
    y_hat = np.einsum('ns,nsc->nc', weights, predictions)
    return y_hat, weights
