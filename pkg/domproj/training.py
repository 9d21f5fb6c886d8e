"""Training loops for the translation model and the classifier."""

import copy
import logging
from pathlib import Path
from typing import Dict, List, Optional, Union

import torch
import torch.nn as nn
import torch.nn.functional as F
from tqdm import tqdm

from domproj import losses
from domproj.augment import train_augmentation
from domproj.core import (
    CheckpointNotFoundError, DivergenceError, ExperimentConfig, NumericalError, ValidationError, component_seed,
    config_hash, configure_determinism, resolve_device, torch_generator,
)
from domproj.data import DatasetBundle, DomainDataset, Split
from domproj.storage import Checkpoint, RunStore, load_checkpoint, save_checkpoint
from domproj.translation import (
    TranslationModel, build_translation_model, ema_copy, map_latent, translate, update_ema,
)

logger = logging.getLogger(__name__)

TRANSLATION_NETS = ('generator', 'mapping', 'style_encoder', 'discriminator')
EMA_NETS = ('generator', 'mapping', 'style_encoder')

DatasetLike = Union[DomainDataset, DatasetBundle]


def _training_split(dataset: DatasetLike) -> DomainDataset:
    if isinstance(dataset, DatasetBundle):
        return dataset[Split.TRAIN]
    return dataset


def _generator_states(generators: Dict[str, torch.Generator]) -> Dict[str, torch.Tensor]:
    return {name: g.get_state() for name, g in generators.items()}


def _restore_generators(generators: Dict[str, torch.Generator], states: Dict[str, torch.Tensor]):
    for name, g in generators.items():
        g.set_state(states[name])


def _sample_indices(n: int, batch_size: int, generator: torch.Generator) -> torch.Tensor:
    return torch.randint(0, n, (batch_size,), generator=generator)


##################################################################################
# Translation model
##################################################################################

class TranslationTrainer:
    """Alternating D-step / G-step training of G, F, E and D.

    Every G-step trains both style paths: a latent-guided style F(z, d) and a
    reference-guided style E(x_ref, d) from a real image of the target domain.
    """

    def __init__(self, cfg: ExperimentConfig, dataset: DatasetLike, store: Optional[RunStore] = None,
                 progress: bool = False):
        self.cfg = cfg
        self.dataset = _training_split(dataset)
        self.store = store
        self.progress = progress

        domains = self.dataset.domain_ids
        if len(domains) < 2:
            raise ValidationError(f'translation training needs at least 2 source domains, got {len(domains)}',
                                  'num_domains')
        if max(domains) >= cfg.num_domains:
            raise ValidationError(
                f'dataset domain index {max(domains)} does not fit num_domains={cfg.num_domains}', 'num_domains')
        self.domain_indices = {d: self.dataset.indices_of_domain(d) for d in domains}
        self.domain_list = torch.tensor(domains)

        configure_determinism(cfg.deterministic)
        self.device = resolve_device(cfg.device)
        self.model = build_translation_model(cfg).to(self.device)
        self.ema = {name: ema_copy(getattr(self.model, name)) for name in EMA_NETS} if cfg.use_ema else {}
        self.extractor = losses.build_perceptual_extractor(cfg).to(self.device)
        self.optimizers = {
            name: torch.optim.Adam(getattr(self.model, name).parameters(), lr=cfg.learning_rate,
                                   betas=(cfg.beta1, cfg.beta2))
            for name in TRANSLATION_NETS
        }
        self.generators = {'data': torch_generator(cfg.seed, 'data'), 'latent': torch_generator(cfg.seed, 'latent')}
        self.weights = cfg.loss_weights()
        self.step = 0
        self.pending: List[Dict[str, float]] = []
        self.loss_rows: List[Dict[str, float]] = []
        self.last_checkpoint: Optional[Path] = None

    # Sampling
    def _references(self, targets: torch.Tensor) -> torch.Tensor:
        """One random real image index of each target domain"""
        u = torch.rand(len(targets), generator=self.generators['data'])
        picks = []
        for d, r in zip(targets.tolist(), u.tolist()):
            pool = self.domain_indices[d]
            picks.append(pool[min(int(r * len(pool)), len(pool) - 1)])
        return torch.stack(picks)

    def sample_batch(self) -> Dict[str, torch.Tensor]:
        data = self.generators['data']
        batch_size = self.cfg.translation_batch_size
        idx = _sample_indices(len(self.dataset), batch_size, data)
        targets = self.domain_list[torch.randint(0, len(self.domain_list), (batch_size,), generator=data)]
        ref1, ref2 = self._references(targets), self._references(targets)
        latent = self.generators['latent']
        z1 = torch.randn((batch_size, self.cfg.latent_dim), generator=latent)
        z2 = torch.randn((batch_size, self.cfg.latent_dim), generator=latent)
        images = self.dataset.images
        batch = {
            'x': images[idx], 'y': self.dataset.domains[idx], 'y_trg': targets,
            'x_ref1': images[ref1], 'x_ref2': images[ref2], 'z1': z1, 'z2': z2,
        }
        return {key: value.to(self.device) for key, value in batch.items()}

    def _zero_grad(self):
        for opt in self.optimizers.values():
            opt.zero_grad(set_to_none=True)

    # Steps
    def _styles(self, batch, path: str):
        m = self.model
        if path == 'latent':
            return map_latent(m.mapping, batch['z1'], batch['y_trg']), map_latent(m.mapping, batch['z2'], batch['y_trg'])
        return m.style_encoder(batch['x_ref1'], batch['y_trg']), m.style_encoder(batch['x_ref2'], batch['y_trg'])

    def discriminator_step(self, batch) -> Dict[str, torch.Tensor]:
        m = self.model
        x, y, y_trg = batch['x'], batch['y'], batch['y_trg']
        real_logits = m.discriminator.score(x, y)
        gp = losses.gradient_penalty(m.discriminator, x, y)
        adv_d = 0.0
        for path in ('latent', 'reference'):
            with torch.no_grad():
                s_trg, _ = self._styles(batch, path)
                x_fake = translate(m.generator, x, s_trg)
            fake_logits = m.discriminator.score(x_fake, y_trg)
            adv_d = adv_d + losses.adversarial_loss(real_logits, fake_logits)[0] / 2
        total_d = losses.discriminator_total(self.weights, adv_d, gp)
        self._zero_grad()
        total_d.backward()
        self.optimizers['discriminator'].step()
        return {'adv_d': adv_d, 'gp': gp, 'total_d': total_d}

    def generator_step(self, batch) -> Dict[str, torch.Tensor]:
        m = self.model
        x, y, y_trg = batch['x'], batch['y'], batch['y_trg']
        lambda_ds = losses.diversity_weight(self.cfg, self.step)
        with torch.no_grad():
            real_logits = m.discriminator.score(x, y)

        terms = {key: 0.0 for key in ('adv_g', 'sty', 'ds', 'cyc', 'percep', 'total_g')}
        for path in ('latent', 'reference'):
            s_trg, s_trg2 = self._styles(batch, path)
            x_fake = translate(m.generator, x, s_trg)
            _, adv_g = losses.adversarial_loss(real_logits, m.discriminator.score(x_fake, y_trg))
            sty = losses.style_reconstruction_loss(s_trg, m.style_encoder(x_fake, y_trg))
            ds = losses.diversity_loss(x_fake, translate(m.generator, x, s_trg2).detach())
            x_rec = translate(m.generator, x_fake, m.style_encoder(x, y))
            cyc = losses.cycle_loss(x, x_rec)
            percep = losses.perceptual_domain_invariant_loss(x, x_fake, self.extractor)
            total_g = losses.generator_total(self.weights, adv_g, sty, ds, cyc, percep, lambda_ds)
            for key, value in (('adv_g', adv_g), ('sty', sty), ('ds', ds), ('cyc', cyc), ('percep', percep),
                               ('total_g', total_g)):
                terms[key] = terms[key] + value / 2

        self._zero_grad()
        terms['total_g'].backward()
        for name in EMA_NETS:
            self.optimizers[name].step()
        for name, ema in self.ema.items():
            update_ema(ema, getattr(self.model, name), self.cfg.ema_beta)
        return terms

    def train_step(self) -> losses.LossBreakdown:
        self.model.train()
        batch = self.sample_batch()
        try:
            d_terms = self.discriminator_step(batch)
            g_terms = self.generator_step(batch)
        except NumericalError as e:
            raise DivergenceError(f'translation training diverged at step {self.step + 1}: {e}', self.last_checkpoint)
        row = losses.breakdown({**d_terms, **g_terms})
        if not all(torch.isfinite(torch.tensor(list(row.as_row().values())))):
            raise DivergenceError(f'non-finite translation loss at step {self.step + 1}: {row.as_row()}',
                                  self.last_checkpoint)
        self.step += 1
        return row

    def train(self, steps: Optional[int] = None) -> Checkpoint:
        """Run until `steps` total steps (default: translation_steps) and return the final checkpoint"""
        steps = steps or self.cfg.translation_steps
        for _ in tqdm(range(self.step, steps), desc='translation', initial=self.step, total=steps,
                      disable=not self.progress):
            self.pending.append(self.train_step().as_row())
            if self.step % self.cfg.log_every == 0:
                self._flush_log()
            if self.step % self.cfg.checkpoint_every == 0 and self.step < steps:
                self.save()
        self._flush_log()
        checkpoint = self.checkpoint()
        self.save(checkpoint)
        return checkpoint

    def _flush_log(self):
        if not self.pending:
            return
        mean = losses.average_breakdowns([losses.LossBreakdown(**r) for r in self.pending])
        row = {'step': self.step, 'lambda_ds': losses.diversity_weight(self.cfg, self.step - 1), **mean.as_row()}
        self.pending = []
        self.loss_rows.append(row)
        logger.info('translation step %d: adv_d %.4f adv_g %.4f sty %.4f ds %.4f cyc %.4f percep %.4f gp %.4f',
                    self.step, row['adv_d'], row['adv_g'], row['sty'], row['ds'], row['cyc'], row['percep'],
                    row['gp'])
        if self.store is not None:
            self.store.save_loss_log('translation', [row])

    # Checkpoints
    def checkpoint(self) -> Checkpoint:
        modules = {name: getattr(self.model, name).state_dict() for name in TRANSLATION_NETS}
        modules.update({f'{name}_ema': ema.state_dict() for name, ema in self.ema.items()})
        trainer_state = {
            'step': self.step,
            'optimizers': {name: opt.state_dict() for name, opt in self.optimizers.items()},
            'generators': _generator_states(self.generators),
            'pending': self.pending,
        }
        return Checkpoint('translation', self.step, self.cfg.seed, config_hash(self.cfg), copy.deepcopy(modules),
                          copy.deepcopy(trainer_state), self.cfg.to_dict())

    def save(self, checkpoint: Optional[Checkpoint] = None) -> Optional[Path]:
        if self.store is None:
            return None
        checkpoint = checkpoint or self.checkpoint()
        self.last_checkpoint = save_checkpoint(checkpoint, self.store.checkpoint_dir('translation', checkpoint.step))
        return self.last_checkpoint

    def restore(self, checkpoint: Checkpoint):
        """Continue exactly where the checkpoint left off"""
        if checkpoint.trainer_state is None:
            raise CheckpointNotFoundError('checkpoint has no trainer state to resume from')
        for name in TRANSLATION_NETS:
            getattr(self.model, name).load_state_dict(checkpoint.modules[name])
        for name, ema in self.ema.items():
            ema.load_state_dict(checkpoint.modules.get(f'{name}_ema', checkpoint.modules[name]))
        state = checkpoint.trainer_state
        for name, opt in self.optimizers.items():
            opt.load_state_dict(state['optimizers'][name])
        _restore_generators(self.generators, state['generators'])
        self.pending = [dict(row) for row in state.get('pending', [])]
        self.step = int(state['step'])


def train_translation(cfg: ExperimentConfig, dataset: DatasetLike, store: Optional[RunStore] = None,
                      resume: Optional[Union[str, Path, Checkpoint]] = None, steps: Optional[int] = None,
                      progress: bool = False) -> Checkpoint:
    trainer = TranslationTrainer(cfg, dataset, store, progress)
    if resume is not None:
        checkpoint = resume if isinstance(resume, Checkpoint) else load_checkpoint(resume, cfg, 'translation')
        trainer.restore(checkpoint)
        logger.info('Resuming translation training from step %d', trainer.step)
    return trainer.train(steps)


def load_translation_model(cfg: ExperimentConfig, path: Union[str, Path, Checkpoint],
                           use_ema: Optional[bool] = None, generator_channels: Optional[int] = None) -> TranslationModel:
    """Inference copy of a trained translation model, EMA weights by default when present"""
    checkpoint = path if isinstance(path, Checkpoint) else load_checkpoint(path, cfg, 'translation')
    use_ema = cfg.use_ema if use_ema is None else use_ema
    model = build_translation_model(cfg, generator_channels)
    for name in TRANSLATION_NETS:
        key = f'{name}_ema' if use_ema and f'{name}_ema' in checkpoint.modules else name
        getattr(model, name).load_state_dict(checkpoint.modules[key])
    model.requires_grad_(False)
    return model.to(resolve_device(cfg.device)).eval()


##################################################################################
# Classifier
##################################################################################

class BasicBlock(nn.Module):
    def __init__(self, dim_in: int, dim_out: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(dim_in, dim_out, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(dim_out)
        self.conv2 = nn.Conv2d(dim_out, dim_out, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(dim_out)
        self.shortcut = nn.Identity()
        if stride != 1 or dim_in != dim_out:
            self.shortcut = nn.Sequential(nn.Conv2d(dim_in, dim_out, 1, stride, bias=False), nn.BatchNorm2d(dim_out))

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


class SmallResNet(nn.Module):
    """Residual convnet of about a million parameters for desk-scale runs"""

    def __init__(self, num_classes: int, in_channels: int = 3, widths=(32, 64, 128, 256)):
        super().__init__()
        layers = [nn.Conv2d(in_channels, widths[0], 3, 1, 1, bias=False), nn.BatchNorm2d(widths[0]), nn.ReLU()]
        dim_in = widths[0]
        for i, width in enumerate(widths):
            layers.append(BasicBlock(dim_in, width, stride=1 if i == 0 else 2))
            dim_in = width
        layers += [nn.AdaptiveAvgPool2d(1), nn.Flatten()]
        self.trunk = nn.Sequential(*layers)
        self.feature_dim = dim_in
        self.head = nn.Linear(dim_in, num_classes)

    def features(self, x):
        return self.trunk(x)

    def forward(self, x):
        return self.head(self.features(x))


class TorchvisionClassifier(nn.Module):
    """torchvision backbone (random init) with its classification layer split off as `head`"""

    def __init__(self, arch: str, num_classes: int):
        super().__init__()
        from torchvision import models

        if arch == 'resnet18':
            backbone = models.resnet18(weights=None)
            self.feature_dim = backbone.fc.in_features
            backbone.fc = nn.Identity()
        elif arch == 'densenet121':
            backbone = models.densenet121(weights=None)
            self.feature_dim = backbone.classifier.in_features
            backbone.classifier = nn.Identity()
        else:
            raise ValidationError(f'unknown torchvision classifier {arch!r}', 'classifier_arch')
        self.backbone = backbone
        self.head = nn.Linear(self.feature_dim, num_classes)

    def features(self, x):
        return self.backbone(x)

    def forward(self, x):
        return self.head(self.features(x))


def build_classifier(cfg: ExperimentConfig) -> nn.Module:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(component_seed(cfg.seed, 'init'))
        if cfg.classifier_arch == 'resnet_small':
            return SmallResNet(cfg.num_classes, cfg.num_channels)
        return TorchvisionClassifier(cfg.classifier_arch, cfg.num_classes)


class ClassifierTrainer:
    def __init__(self, cfg: ExperimentConfig, dataset: DatasetLike, augmentation_mode: Optional[str] = None,
                 translation: Optional[Union[str, Path, TranslationModel]] = None,
                 store: Optional[RunStore] = None, progress: bool = False):
        self.cfg = cfg
        self.dataset = _training_split(dataset)
        self.mode = augmentation_mode or cfg.augmentation_mode
        if self.mode not in ('none', 'stargan', 'color_jitter', 'he_jitter', 'geometric'):
            raise ValidationError(f'unknown augmentation mode {self.mode!r}', 'augmentation_mode')
        self.store = store
        self.progress = progress

        configure_determinism(cfg.deterministic)
        self.device = resolve_device(cfg.device)
        self.translation: Optional[TranslationModel] = None
        if self.mode == 'stargan':
            if translation is None:
                raise CheckpointNotFoundError('stargan augmentation needs a trained translation checkpoint')
            if isinstance(translation, TranslationModel):
                self.translation = translation.to(self.device).eval()
            else:
                self.translation = load_translation_model(cfg, translation)

        self.model = build_classifier(cfg).to(self.device)
        self.optimizer = torch.optim.Adam(self.model.parameters(), lr=cfg.classifier_lr)
        self.generators = {'data': torch_generator(cfg.seed, 'data'), 'augment': torch_generator(cfg.seed, 'augment')}
        self.step = 0
        self.pending: List[Dict[str, float]] = []
        self.loss_rows: List[Dict[str, float]] = []
        self.last_checkpoint: Optional[Path] = None

    @torch.no_grad()
    def translate_batch(self, x: torch.Tensor) -> torch.Tensor:
        """Replace each image, with probability p_aug, by its projection into a uniform random source domain"""
        augment = self.generators['augment']
        n = x.shape[0]
        replace = torch.rand(n, generator=augment) < self.cfg.p_aug
        targets = torch.randint(0, self.cfg.num_domains, (n,), generator=augment)
        z = torch.randn((n, self.cfg.latent_dim), generator=augment)
        if not replace.any():
            return x
        model = self.translation
        mask = replace.to(x.device)
        s = map_latent(model.mapping, z[replace].to(x.device), targets[replace].to(x.device))
        x = x.clone()
        x[mask] = translate(model.generator, x[mask], s)
        return x

    def augment(self, x: torch.Tensor) -> torch.Tensor:
        if self.mode == 'stargan':
            return self.translate_batch(x)
        if self.mode == 'none':
            return x
        return train_augmentation(x, self.mode, self.cfg, self.generators['augment'])

    def train_step(self) -> Dict[str, float]:
        self.model.train()
        idx = _sample_indices(len(self.dataset), self.cfg.classifier_batch_size, self.generators['data'])
        x = self.dataset.images[idx].to(self.device)
        y = self.dataset.labels[idx].to(self.device)
        x = self.augment(x)
        logits = self.model(x)
        loss = F.cross_entropy(logits, y)
        if not torch.isfinite(loss):
            raise DivergenceError(f'non-finite classifier loss at step {self.step + 1}', self.last_checkpoint)
        self.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        self.optimizer.step()
        self.step += 1
        return {'loss': float(loss.detach()), 'accuracy': float((logits.argmax(1) == y).float().mean())}

    def train(self, steps: Optional[int] = None) -> Checkpoint:
        steps = steps or self.cfg.classifier_steps
        for _ in tqdm(range(self.step, steps), desc=f'classifier ({self.mode})', initial=self.step, total=steps,
                      disable=not self.progress):
            self.pending.append(self.train_step())
            if self.step % self.cfg.log_every == 0:
                self._flush_log()
            if self.step % self.cfg.checkpoint_every == 0 and self.step < steps:
                self.save()
        self._flush_log()
        checkpoint = self.checkpoint()
        self.save(checkpoint)
        return checkpoint

    def _flush_log(self):
        if not self.pending:
            return
        row = {'step': self.step}
        row.update({key: sum(r[key] for r in self.pending) / len(self.pending) for key in self.pending[0]})
        self.pending = []
        self.loss_rows.append(row)
        logger.info('classifier step %d: loss %.4f accuracy %.3f', self.step, row['loss'], row['accuracy'])
        if self.store is not None:
            self.store.save_loss_log('classifier', [row])

    def checkpoint(self) -> Checkpoint:
        trainer_state = {
            'step': self.step,
            'optimizer': self.optimizer.state_dict(),
            'generators': _generator_states(self.generators),
            'pending': self.pending,
            'augmentation_mode': self.mode,
        }
        return Checkpoint('classifier', self.step, self.cfg.seed, config_hash(self.cfg),
                          copy.deepcopy({'classifier': self.model.state_dict()}), copy.deepcopy(trainer_state),
                          self.cfg.to_dict())

    def save(self, checkpoint: Optional[Checkpoint] = None) -> Optional[Path]:
        if self.store is None:
            return None
        checkpoint = checkpoint or self.checkpoint()
        self.last_checkpoint = save_checkpoint(checkpoint, self.store.checkpoint_dir('classifier', checkpoint.step))
        return self.last_checkpoint

    def restore(self, checkpoint: Checkpoint):
        if checkpoint.trainer_state is None:
            raise CheckpointNotFoundError('checkpoint has no trainer state to resume from')
        self.model.load_state_dict(checkpoint.modules['classifier'])
        state = checkpoint.trainer_state
        self.optimizer.load_state_dict(state['optimizer'])
        _restore_generators(self.generators, state['generators'])
        self.pending = [dict(row) for row in state.get('pending', [])]
        self.step = int(state['step'])


def train_classifier(cfg: ExperimentConfig, dataset: DatasetLike, augmentation_mode: Optional[str] = None,
                     translation: Optional[Union[str, Path, TranslationModel]] = None,
                     store: Optional[RunStore] = None, resume: Optional[Union[str, Path, Checkpoint]] = None,
                     steps: Optional[int] = None, progress: bool = False) -> Checkpoint:
    trainer = ClassifierTrainer(cfg, dataset, augmentation_mode, translation, store, progress)
    if resume is not None:
        checkpoint = resume if isinstance(resume, Checkpoint) else load_checkpoint(resume, cfg, 'classifier')
        trainer.restore(checkpoint)
        logger.info('Resuming classifier training from step %d', trainer.step)
    return trainer.train(steps)


def load_classifier(cfg: ExperimentConfig, path: Union[str, Path, Checkpoint]) -> nn.Module:
    checkpoint = path if isinstance(path, Checkpoint) else load_checkpoint(path, cfg, 'classifier')
    model = build_classifier(cfg)
    model.load_state_dict(checkpoint.modules['classifier'])
    model.requires_grad_(False)
    return model.to(resolve_device(cfg.device)).eval()
