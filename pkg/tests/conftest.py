import pytest
import torch

from domproj.core import ExperimentConfig
from domproj.data import generate_synthetic_dg


def make_tiny_config(**changes) -> ExperimentConfig:
    """Networks small enough for CPU unit tests"""
    values = dict(
        run_id='tiny', seed=0, image_resolution=16, num_domains=3, num_classes=2,
        style_dim=16, latent_dim=8, generator_channels=8, encoder_channels=8, max_channels=32,
        num_res_blocks=1, mapping_hidden=16,
        translation_batch_size=4, translation_steps=4, classifier_batch_size=8, classifier_steps=4,
        log_every=2, checkpoint_every=2, eval_batch_size=8, device='cpu',
    )
    values.update(changes)
    return ExperimentConfig(**values)


@pytest.fixture
def tiny_cfg():
    return make_tiny_config()


@pytest.fixture(scope='session')
def tiny_synthetic():
    return generate_synthetic_dg(4, 3, 2, seed=0, num_classes=2, resolution=16)


@pytest.fixture(scope='session')
def tiny_bundle(tiny_synthetic):
    return tiny_synthetic.merged()


@pytest.fixture
def image_batch():
    g = torch.Generator().manual_seed(0)
    return torch.rand((5, 3, 16, 16), generator=g) * 2 - 1
