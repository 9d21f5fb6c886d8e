"""Image transforms shared by train-time augmentation and the baseline TTA methods.

All transforms take and return (N, C, H, W) batches in [-1, 1] and draw randomness only
from the torch.Generator they are given.
"""

from dataclasses import dataclass
from typing import List

import numpy as np
import torch
import torchvision.transforms.functional as TF
from skimage.color import hed_from_rgb, rgb_from_hed

from domproj.core import ArgumentError, ExperimentConfig

# Optical densities are divided by -log(1e-6) so stain concentrations stay O(1)
_LOG_ADJUST = float(np.log(1e-6))


def dihedral_views(x: torch.Tensor) -> List[torch.Tensor]:
    """The 8 elements of the dihedral group: 4 rotations, with and without a horizontal flip"""
    views = []
    for flip in (False, True):
        base = torch.flip(x, dims=[-1]) if flip else x
        for k in range(4):
            views.append(torch.rot90(base, k, dims=[-2, -1]))
    return views


def random_dihedral(x: torch.Tensor, generator: torch.Generator) -> torch.Tensor:
    choice = torch.randint(0, 8, (x.shape[0],), generator=generator, device=generator.device).tolist()
    out = []
    for img, c in zip(x, choice):
        if c >= 4:
            img = torch.flip(img, dims=[-1])
        out.append(torch.rot90(img, c % 4, dims=[-2, -1]))
    return torch.stack(out)


@dataclass(frozen=True)
class JitterMagnitudes:
    brightness: float = 0.0
    contrast: float = 0.0
    saturation: float = 0.0
    hue: float = 0.0

    @classmethod
    def from_config(cls, cfg: ExperimentConfig) -> 'JitterMagnitudes':
        return cls(cfg.jitter_brightness, cfg.jitter_contrast, cfg.jitter_saturation, cfg.jitter_hue)

    @property
    def is_zero(self) -> bool:
        return not any((self.brightness, self.contrast, self.saturation, self.hue))


def _uniform(n: int, generator: torch.Generator, low: float, high: float) -> List[float]:
    u = torch.rand(n, generator=generator, device=generator.device)
    return (low + (high - low) * u).tolist()


def color_jitter(x: torch.Tensor, magnitudes: JitterMagnitudes, generator: torch.Generator) -> torch.Tensor:
    """Random brightness, contrast, saturation and hue perturbation per image"""
    if magnitudes.is_zero:
        return x
    n = x.shape[0]
    brightness = _uniform(n, generator, 1 - magnitudes.brightness, 1 + magnitudes.brightness)
    contrast = _uniform(n, generator, 1 - magnitudes.contrast, 1 + magnitudes.contrast)
    saturation = _uniform(n, generator, 1 - magnitudes.saturation, 1 + magnitudes.saturation)
    hue = _uniform(n, generator, -magnitudes.hue, magnitudes.hue)

    out = []
    for i, img in enumerate((x + 1) / 2):
        img = TF.adjust_brightness(img, max(brightness[i], 0.0))
        img = TF.adjust_contrast(img, max(contrast[i], 0.0))
        if img.shape[0] == 3:
            img = TF.adjust_saturation(img, max(saturation[i], 0.0))
            if magnitudes.hue:
                img = TF.adjust_hue(img, hue[i])
        out.append(img)
    return torch.stack(out) * 2 - 1


def he_jitter(x: torch.Tensor, alpha: float, beta: float, generator: torch.Generator) -> torch.Tensor:
    """Stain-space jitter: scale and shift hematoxylin, eosin and DAB concentrations per image"""
    if x.shape[1] != 3:
        raise ArgumentError(f'H&E jitter needs RGB images, got {x.shape[1]} channels')
    if alpha == 0 and beta == 0:
        return x
    n = x.shape[0]
    device = x.device
    to_hed = torch.as_tensor(hed_from_rgb, dtype=x.dtype, device=device)
    to_rgb = torch.as_tensor(rgb_from_hed, dtype=x.dtype, device=device)

    rgb = ((x + 1) / 2).clamp_min(1e-6)
    od = torch.log(rgb) / _LOG_ADJUST
    stains = torch.einsum('nchw,cd->ndhw', od, to_hed)

    scale = torch.rand((n, 3, 1, 1), generator=generator, device=generator.device).to(device)
    shift = torch.rand((n, 3, 1, 1), generator=generator, device=generator.device).to(device)
    stains = stains * (1 + (2 * scale - 1) * alpha) + (2 * shift - 1) * beta

    od = torch.einsum('ndhw,dc->nchw', stains, to_rgb)
    rgb = torch.exp(od * _LOG_ADJUST).clamp(0, 1)
    return rgb * 2 - 1


def train_augmentation(x: torch.Tensor, mode: str, cfg: ExperimentConfig, generator: torch.Generator) -> torch.Tensor:
    """Classic (model-free) train-time augmentation modes"""
    if mode == 'geometric':
        return random_dihedral(x, generator)
    if mode == 'color_jitter':
        return color_jitter(x, JitterMagnitudes.from_config(cfg), generator)
    if mode == 'he_jitter':
        return he_jitter(x, cfg.he_jitter_alpha, cfg.he_jitter_beta, generator)
    if mode == 'none':
        return x
    raise ArgumentError(f'{mode!r} is not a model-free augmentation mode')
