"""Multi-domain style-based translation networks.

G translates an image towards the appearance described by a style vector, F maps a
Gaussian latent plus a domain label to a style vector, E extracts a style vector from a
reference image of a known domain, and D scores how real an image looks for each of
the S source domains (one shared trunk, one output head per domain).
"""

import copy
import logging
import math
from pathlib import Path
from typing import List, Optional, Union

import torch
import torch.nn as nn
import torch.nn.functional as F

from domproj.core import (
    DomainLabel, ExperimentConfig, ShapeError, check_domain, check_image_batch, component_seed,
)

logger = logging.getLogger(__name__)

DomainArg = Union[int, DomainLabel, torch.Tensor]


##################################################################################
# Blocks
##################################################################################

class ResBlock(nn.Module):
    """Pre-activation residual block with optional instance norm and 2x downsampling"""

    def __init__(self, dim_in: int, dim_out: int, normalize: bool = False, downsample: bool = False):
        super().__init__()
        self.normalize = normalize
        self.downsample = downsample
        self.learned_sc = dim_in != dim_out
        self.conv1 = nn.Conv2d(dim_in, dim_in, 3, 1, 1)
        self.conv2 = nn.Conv2d(dim_in, dim_out, 3, 1, 1)
        if self.normalize:
            self.norm1 = nn.InstanceNorm2d(dim_in, affine=True)
            self.norm2 = nn.InstanceNorm2d(dim_in, affine=True)
        if self.learned_sc:
            self.conv1x1 = nn.Conv2d(dim_in, dim_out, 1, 1, 0, bias=False)

    def _shortcut(self, x):
        if self.learned_sc:
            x = self.conv1x1(x)
        if self.downsample:
            x = F.avg_pool2d(x, 2)
        return x

    def _residual(self, x):
        if self.normalize:
            x = self.norm1(x)
        x = self.conv1(F.leaky_relu(x, 0.2))
        if self.downsample:
            x = F.avg_pool2d(x, 2)
        if self.normalize:
            x = self.norm2(x)
        return self.conv2(F.leaky_relu(x, 0.2))

    def forward(self, x):
        return (self._shortcut(x) + self._residual(x)) / math.sqrt(2)


class AdaIN(nn.Module):
    """Instance norm whose per-channel scale and shift are predicted from a style vector"""

    def __init__(self, style_dim: int, num_features: int):
        super().__init__()
        self.norm = nn.InstanceNorm2d(num_features, affine=False)
        self.fc = nn.Linear(style_dim, num_features * 2)

    def forward(self, x, s):
        h = self.fc(s).view(s.size(0), -1, 1, 1)
        gamma, beta = torch.chunk(h, chunks=2, dim=1)
        return (1 + gamma) * self.norm(x) + beta


class AdainResBlock(nn.Module):
    def __init__(self, dim_in: int, dim_out: int, style_dim: int, upsample: bool = False):
        super().__init__()
        self.upsample = upsample
        self.learned_sc = dim_in != dim_out
        self.conv1 = nn.Conv2d(dim_in, dim_out, 3, 1, 1)
        self.conv2 = nn.Conv2d(dim_out, dim_out, 3, 1, 1)
        self.norm1 = AdaIN(style_dim, dim_in)
        self.norm2 = AdaIN(style_dim, dim_out)
        if self.learned_sc:
            self.conv1x1 = nn.Conv2d(dim_in, dim_out, 1, 1, 0, bias=False)

    def _shortcut(self, x):
        if self.upsample:
            x = F.interpolate(x, scale_factor=2, mode='nearest')
        if self.learned_sc:
            x = self.conv1x1(x)
        return x

    def _residual(self, x, s):
        x = F.leaky_relu(self.norm1(x, s), 0.2)
        if self.upsample:
            x = F.interpolate(x, scale_factor=2, mode='nearest')
        x = self.conv1(x)
        x = F.leaky_relu(self.norm2(x, s), 0.2)
        return self.conv2(x)

    def forward(self, x, s):
        return (self._shortcut(x) + self._residual(x, s)) / math.sqrt(2)


def num_trunk_downsamples(resolution: int) -> int:
    """Downsampling stages of the E/D trunk: stop at ~4x4 and never split an odd size"""
    twos = (resolution & -resolution).bit_length() - 1
    return max(1, min(int(math.log2(resolution)) - 2, twos))


def conv_trunk(resolution: int, in_channels: int, channels: int, max_channels: int, out_dim: int) -> nn.Sequential:
    repeat = num_trunk_downsamples(resolution)
    blocks: List[nn.Module] = [nn.Conv2d(in_channels, channels, 3, 1, 1)]
    dim_in = channels
    for _ in range(repeat):
        dim_out = min(dim_in * 2, max_channels)
        blocks.append(ResBlock(dim_in, dim_out, downsample=True))
        dim_in = dim_out
    final_size = resolution >> repeat
    blocks += [nn.LeakyReLU(0.2), nn.Conv2d(dim_in, out_dim, final_size, 1, 0), nn.LeakyReLU(0.2)]
    return nn.Sequential(*blocks)


##################################################################################
# Networks
##################################################################################

class Generator(nn.Module):
    """Encoder-decoder; the style enters through AdaIN in the decoder blocks only"""

    def __init__(self, resolution: int, style_dim: int = 64, channels: int = 16, max_channels: int = 128,
                 num_downsamples: int = 2, num_res_blocks: int = 2, in_channels: int = 3):
        super().__init__()
        self.resolution = resolution
        self.style_dim = style_dim
        self.in_channels = in_channels
        self.from_rgb = nn.Conv2d(in_channels, channels, 3, 1, 1)
        self.encode = nn.ModuleList()
        self.decode = nn.ModuleList()

        dim_in = dim_out = channels
        for _ in range(num_downsamples):
            dim_out = min(dim_in * 2, max_channels)
            self.encode.append(ResBlock(dim_in, dim_out, normalize=True, downsample=True))
            self.decode.insert(0, AdainResBlock(dim_out, dim_in, style_dim, upsample=True))
            dim_in = dim_out
        for _ in range(num_res_blocks):
            self.encode.append(ResBlock(dim_out, dim_out, normalize=True))
            self.decode.insert(0, AdainResBlock(dim_out, dim_out, style_dim))

        self.to_rgb = nn.Sequential(
            nn.InstanceNorm2d(channels, affine=True),
            nn.LeakyReLU(0.2),
            nn.Conv2d(channels, in_channels, 1, 1, 0),
            nn.Tanh(),
        )

    def forward(self, x, s):
        x = self.from_rgb(x)
        for block in self.encode:
            x = block(x)
        for block in self.decode:
            x = block(x, s)
        return self.to_rgb(x)


class MappingNetwork(nn.Module):
    """Shared MLP trunk plus one linear style head per domain"""

    def __init__(self, latent_dim: int = 16, style_dim: int = 64, num_domains: int = 3, hidden: int = 64):
        super().__init__()
        self.latent_dim = latent_dim
        self.num_domains = num_domains
        layers = [nn.Linear(latent_dim, hidden), nn.ReLU()]
        for _ in range(3):
            layers += [nn.Linear(hidden, hidden), nn.ReLU()]
        self.shared = nn.Sequential(*layers)
        self.heads = nn.ModuleList([nn.Linear(hidden, style_dim) for _ in range(num_domains)])

    def forward(self, z, y):
        h = self.shared(z)
        out = torch.stack([head(h) for head in self.heads], dim=1)  # (N, S, style_dim)
        return out[torch.arange(y.size(0), device=y.device), y]


class StyleEncoder(nn.Module):
    def __init__(self, resolution: int, style_dim: int = 64, num_domains: int = 3, channels: int = 16,
                 max_channels: int = 128, in_channels: int = 3):
        super().__init__()
        self.resolution = resolution
        self.in_channels = in_channels
        self.num_domains = num_domains
        self.trunk = conv_trunk(resolution, in_channels, channels, max_channels, max_channels)
        self.heads = nn.ModuleList([nn.Linear(max_channels, style_dim) for _ in range(num_domains)])

    def forward(self, x, y):
        h = self.trunk(x).flatten(1)
        out = torch.stack([head(h) for head in self.heads], dim=1)
        return out[torch.arange(y.size(0), device=y.device), y]


class Discriminator(nn.Module):
    """Discriminator bank: a shared trunk and S real/fake logit heads"""

    def __init__(self, resolution: int, num_domains: int = 3, channels: int = 16, max_channels: int = 128,
                 in_channels: int = 3):
        super().__init__()
        self.resolution = resolution
        self.in_channels = in_channels
        self.num_domains = num_domains
        self.trunk = conv_trunk(resolution, in_channels, channels, max_channels, max_channels)
        self.heads = nn.Conv2d(max_channels, num_domains, 1, 1, 0)

    def forward(self, x):
        """All S logits per image, shape (N, S)"""
        return self.heads(self.trunk(x)).flatten(1)

    def score(self, x, y):
        """Logit of the head selected by y for each image, shape (N,)"""
        logits = self(x)
        return logits[torch.arange(y.size(0), device=y.device), y]


class TranslationModel(nn.Module):
    def __init__(self, cfg: ExperimentConfig, generator_channels: Optional[int] = None):
        super().__init__()
        self.num_domains = cfg.num_domains
        self.latent_dim = cfg.latent_dim
        self.style_dim = cfg.style_dim
        self.resolution = cfg.image_resolution
        self.generator = Generator(cfg.image_resolution, cfg.style_dim, generator_channels or cfg.generator_channels,
                                   cfg.max_channels, num_res_blocks=cfg.num_res_blocks, in_channels=cfg.num_channels)
        self.mapping = MappingNetwork(cfg.latent_dim, cfg.style_dim, cfg.num_domains, cfg.mapping_hidden)
        self.style_encoder = StyleEncoder(cfg.image_resolution, cfg.style_dim, cfg.num_domains, cfg.encoder_channels,
                                          cfg.max_channels, cfg.num_channels)
        self.discriminator = Discriminator(cfg.image_resolution, cfg.num_domains, cfg.encoder_channels,
                                           cfg.max_channels, cfg.num_channels)

    @property
    def device(self) -> torch.device:
        return next(self.parameters()).device


def build_translation_model(cfg: ExperimentConfig, generator_channels: Optional[int] = None) -> TranslationModel:
    """Create the four networks with weights seeded from the config's init stream"""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(component_seed(cfg.seed, 'init'))
        model = TranslationModel(cfg, generator_channels)
    logger.info('Translation model: G %d, F %d, E %d, D %d parameters',
                count_parameters(model.generator), count_parameters(model.mapping),
                count_parameters(model.style_encoder), count_parameters(model.discriminator))
    return model


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def ema_copy(module: nn.Module) -> nn.Module:
    clone = copy.deepcopy(module)
    clone.requires_grad_(False)
    return clone.eval()


@torch.no_grad()
def update_ema(ema: nn.Module, module: nn.Module, beta: float):
    for p_ema, p in zip(ema.parameters(), module.parameters()):
        p_ema.lerp_(p.detach(), 1.0 - beta)
    for b_ema, b in zip(ema.buffers(), module.buffers()):
        b_ema.copy_(b)


##################################################################################
# Operations
##################################################################################

def map_latent(mapping: MappingNetwork, z: torch.Tensor, d: DomainArg) -> torch.Tensor:
    """Style vector F(z, d) for each latent row"""
    if z.dim() != 2 or z.shape[1] != mapping.latent_dim:
        raise ShapeError(f'latent codes must have shape (N, {mapping.latent_dim}), got {tuple(z.shape)}')
    y = check_domain(d, mapping.num_domains, z.shape[0], z.device)
    return mapping(z, y)


def encode_style(encoder: StyleEncoder, x: torch.Tensor, d: DomainArg) -> torch.Tensor:
    """Style vector E(x, d) extracted from reference images of domain d"""
    check_image_batch(x, encoder.in_channels, encoder.resolution)
    y = check_domain(d, encoder.num_domains, x.shape[0], x.device)
    return encoder(x, y)


def translate(generator: Generator, x: torch.Tensor, s: torch.Tensor) -> torch.Tensor:
    """G(x, s): same shape as x, values in [-1, 1]"""
    check_image_batch(x, generator.in_channels)
    if s.dim() != 2 or s.shape[1] != generator.style_dim:
        raise ShapeError(f'style vectors must have shape (N, {generator.style_dim}), got {tuple(s.shape)}')
    if s.shape[0] != x.shape[0]:
        raise ShapeError(f'{s.shape[0]} style vectors for {x.shape[0]} images')
    return generator(x, s)


def discriminate(discriminator: Discriminator, x: torch.Tensor, d: DomainArg) -> torch.Tensor:
    """Logit of domain head d for each image"""
    check_image_batch(x, discriminator.in_channels, discriminator.resolution)
    y = check_domain(d, discriminator.num_domains, x.shape[0], x.device)
    return discriminator.score(x, y)


def sample_latents(num_domains: int, batch_size: int, latent_dim: int, generator: torch.Generator,
                   device: Union[str, torch.device] = 'cpu') -> torch.Tensor:
    """One standard normal draw per (domain, image), shape (S, N, latent_dim)"""
    z = torch.randn((num_domains, batch_size, latent_dim), generator=generator, device=generator.device)
    return z.to(device)


def translate_latent_guided(model: TranslationModel, x: torch.Tensor, generator: torch.Generator) -> List[torch.Tensor]:
    """Project x into every source domain with a fresh latent-guided style per domain"""
    z = sample_latents(model.num_domains, x.shape[0], model.latent_dim, generator, x.device)
    outputs = []
    for domain in range(model.num_domains):
        s = map_latent(model.mapping, z[domain], domain)
        outputs.append(translate(model.generator, x, s))
    return outputs


def export_onnx(model: TranslationModel, out_dir: Union[str, Path], batch_size: int = 1) -> List[Path]:
    """Write G, F, E and D as ONNX graphs for external inference engines"""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    device = model.device
    x = torch.zeros(batch_size, model.generator.in_channels, model.resolution, model.resolution, device=device)
    z = torch.zeros(batch_size, model.latent_dim, device=device)
    s = torch.zeros(batch_size, model.style_dim, device=device)
    y = torch.zeros(batch_size, dtype=torch.long, device=device)
    batch_axis = {0: 'batch'}

    exports = [
        ('generator', model.generator, (x, s), ['image', 'style'], ['translated']),
        ('mapping', model.mapping, (z, y), ['latent', 'domain'], ['style']),
        ('style_encoder', model.style_encoder, (x, y), ['image', 'domain'], ['style']),
        ('discriminator', model.discriminator, (x,), ['image'], ['logits']),
    ]
    written = []
    was_training = model.training
    model.eval()
    for name, module, args, inputs, outputs in exports:
        path = out_dir / f'{name}.onnx'
        torch.onnx.export(module, args, str(path), input_names=inputs, output_names=outputs,
                          dynamic_axes={key: batch_axis for key in inputs + outputs})
        written.append(path)
        logger.info('Exported %s to %s', name, path)
    model.train(was_training)
    return written
