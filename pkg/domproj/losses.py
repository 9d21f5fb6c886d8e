"""Training objective of the translation model."""

from dataclasses import asdict, dataclass
from typing import Callable, Dict, List, Tuple, Union

import torch
import torch.nn as nn
import torch.nn.functional as F

from domproj.core import ExperimentConfig, NumericalError, ShapeError, check_image_batch

# Seed of the fixed perceptual extractor, independent of the experiment seed
EXTRACTOR_SEED = 1234


@dataclass
class LossBreakdown:
    adv_d: float
    adv_g: float
    sty: float
    ds: float
    cyc: float
    percep: float
    gp: float
    total_g: float
    total_d: float

    def as_row(self) -> Dict[str, float]:
        return asdict(self)


def _check_finite(name: str, logits: torch.Tensor):
    if not torch.isfinite(logits).all():
        bad = (~torch.isfinite(logits)).sum().item()
        raise NumericalError(
            f'{name} contains {bad} non-finite value(s) out of {logits.numel()} '
            f'(min={logits.nan_to_num().min().item():.4g}, max={logits.nan_to_num().max().item():.4g})')


def adversarial_loss(real_logits: torch.Tensor, fake_logits: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    """Non-saturating logistic GAN loss.

    real_logits are D's target-head outputs on real images of their own domain,
    fake_logits the target-head outputs on translated images. Returns (adv_d, adv_g).
    """
    _check_finite('real logits', real_logits)
    _check_finite('fake logits', fake_logits)
    adv_d = F.softplus(-real_logits).mean() + F.softplus(fake_logits).mean()
    adv_g = F.softplus(-fake_logits).mean()
    return adv_d, adv_g


def style_reconstruction_loss(s: torch.Tensor, s_rec: torch.Tensor) -> torch.Tensor:
    return torch.mean(torch.abs(s - s_rec))


def diversity_loss(x1: torch.Tensor, x2: torch.Tensor) -> torch.Tensor:
    """Mean absolute pixel difference between two translations of the same input"""
    return torch.mean(torch.abs(x1 - x2))


def cycle_loss(x: torch.Tensor, x_back: torch.Tensor) -> torch.Tensor:
    return torch.mean(torch.abs(x - x_back))


class RandomConvExtractor(nn.Module):
    """Small frozen conv net with seeded random weights"""

    def __init__(self, in_channels: int = 3, seed: int = EXTRACTOR_SEED):
        super().__init__()
        self.in_channels = in_channels
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.features = nn.Sequential(
                nn.Conv2d(in_channels, 32, 3, 1, 1, padding_mode='reflect'), nn.ReLU(),
                nn.Conv2d(32, 64, 3, 2, 1, padding_mode='reflect'), nn.ReLU(),
                nn.Conv2d(64, 64, 3, 1, 1, padding_mode='reflect'), nn.ReLU(),
                nn.Conv2d(64, 128, 3, 2, 1, padding_mode='reflect'), nn.ReLU(),
            )
            # bias-free ReLU convs: scaling the input scales every feature map by the same factor
            for layer in self.features:
                if isinstance(layer, nn.Conv2d):
                    nn.init.kaiming_normal_(layer.weight, nonlinearity='relu')
                    nn.init.zeros_(layer.bias)
        self.requires_grad_(False)
        self.eval()

    def forward(self, x):
        return self.features(x)


class VGGExtractor(nn.Module):
    """VGG16 up to relu3_3 (ImageNet weights), inputs in [-1, 1]"""

    def __init__(self):
        super().__init__()
        from torchvision.models import VGG16_Weights, vgg16

        self.in_channels = 3
        self.features = vgg16(weights=VGG16_Weights.IMAGENET1K_V1).features[:16]
        self.register_buffer('mean', torch.tensor([0.485, 0.456, 0.406]).view(1, 3, 1, 1))
        self.register_buffer('std', torch.tensor([0.229, 0.224, 0.225]).view(1, 3, 1, 1))
        self.requires_grad_(False)
        self.eval()

    def forward(self, x):
        x = ((x + 1) / 2 - self.mean) / self.std
        return self.features(x)


def build_perceptual_extractor(cfg: ExperimentConfig) -> nn.Module:
    if cfg.perceptual_extractor == 'vgg16':
        return VGGExtractor()
    return RandomConvExtractor(cfg.num_channels)


def feature_distance(x: torch.Tensor, y: torch.Tensor, extractor: nn.Module, normalize: bool = True) -> torch.Tensor:
    """Mean squared distance between (optionally instance-normalized) deep features"""
    if x.shape != y.shape:
        raise ShapeError(f'cannot compare images of shapes {tuple(x.shape)} and {tuple(y.shape)}')
    check_image_batch(x, getattr(extractor, 'in_channels', None))
    fx, fy = extractor(x), extractor(y)
    if normalize:
        fx, fy = F.instance_norm(fx), F.instance_norm(fy)
    return torch.mean((fx - fy) ** 2)


def perceptual_domain_invariant_loss(x: torch.Tensor, x_translated: torch.Tensor, extractor: nn.Module) -> torch.Tensor:
    """Structure distance: instance norm strips domain-specific feature statistics before comparing"""
    return feature_distance(x, x_translated, extractor, normalize=True)


def _select_head(logits: torch.Tensor, d: Union[int, torch.Tensor]) -> torch.Tensor:
    if logits.dim() == 1:
        return logits
    if logits.dim() == 2 and logits.shape[1] == 1:
        return logits[:, 0]
    if isinstance(d, int):
        return logits[:, d]
    return logits[torch.arange(logits.size(0), device=logits.device), d]


def gradient_penalty(discriminator: Callable[[torch.Tensor], torch.Tensor], x_real: torch.Tensor,
                     d: Union[int, torch.Tensor]) -> torch.Tensor:
    """R1 penalty: 0.5 * E ||grad_x D_d(x)||^2 on real images.

    discriminator maps images to (N, S) logits, (N, 1) or (N,) scores.
    """
    x = x_real.detach().requires_grad_(True)
    out = _select_head(discriminator(x), d)
    if not out.requires_grad:
        return torch.zeros((), device=x.device)
    grad, = torch.autograd.grad(outputs=out.sum(), inputs=x, create_graph=True, allow_unused=True)
    if grad is None:
        return torch.zeros((), device=x.device)
    return 0.5 * grad.pow(2).flatten(1).sum(dim=1).mean()


def generator_total(weights: Dict[str, float], adv_g, sty, ds, cyc, percep, lambda_ds=None):
    """lambda-weighted generator objective; diversity is maximised, hence the minus sign"""
    if lambda_ds is None:
        lambda_ds = weights['lambda_ds']
    return (weights['lambda_adv'] * adv_g + weights['lambda_sty'] * sty + weights['lambda_cyc'] * cyc
            + weights['lambda_percep'] * percep - lambda_ds * ds)


def discriminator_total(weights: Dict[str, float], adv_d, gp):
    return adv_d + weights['lambda_gp'] * gp


def diversity_weight(cfg: ExperimentConfig, step: int) -> float:
    """Constant lambda_ds, or a linear decay to 0 over ds_decay_steps when ds_decay is on"""
    if not cfg.ds_decay:
        return cfg.lambda_ds
    return cfg.lambda_ds * max(0.0, 1.0 - step / cfg.ds_decay_steps)


def breakdown(terms: Dict[str, torch.Tensor]) -> LossBreakdown:
    values: Dict[str, float] = {key: float(value.detach()) for key, value in terms.items()}
    return LossBreakdown(**values)


def average_breakdowns(rows: List[LossBreakdown]) -> LossBreakdown:
    keys = LossBreakdown.__dataclass_fields__.keys()
    return LossBreakdown(**{key: sum(getattr(r, key) for r in rows) / len(rows) for key in keys})
