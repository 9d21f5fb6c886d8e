import pytest
import torch

from domproj.augment import (
    JitterMagnitudes, color_jitter, dihedral_views, he_jitter, random_dihedral, train_augmentation,
)
from domproj.core import ArgumentError, torch_generator
from tests.conftest import make_tiny_config


class TestDihedral:
    def test_eight_distinct_views(self):
        x = torch.arange(16.0).view(1, 1, 4, 4)
        views = dihedral_views(x)
        assert len(views) == 8
        assert len({tuple(v.flatten().tolist()) for v in views}) == 8
        assert torch.equal(views[0], x)

    def test_symmetric_image(self):
        x = torch.full((2, 3, 4, 4), 0.3)
        assert all(torch.equal(v, x) for v in dihedral_views(x))

    def test_random_view_is_a_dihedral_view(self):
        x = torch.arange(16.0).view(1, 1, 4, 4)
        out = random_dihedral(x, torch_generator(0, 'augment'))
        assert any(torch.equal(out, v) for v in dihedral_views(x))


class TestColorJitter:
    def test_zero_magnitudes_identity(self, image_batch):
        assert torch.equal(color_jitter(image_batch, JitterMagnitudes(), torch_generator(0, 'jitter')), image_batch)

    def test_range_and_determinism(self, image_batch):
        mags = JitterMagnitudes(0.4, 0.4, 0.4, 0.1)
        a = color_jitter(image_batch, mags, torch_generator(0, 'jitter'))
        b = color_jitter(image_batch, mags, torch_generator(0, 'jitter'))
        assert torch.equal(a, b)
        assert a.shape == image_batch.shape
        assert a.min() >= -1 - 1e-6 and a.max() <= 1 + 1e-6
        assert not torch.equal(a, image_batch)


class TestHEJitter:
    def test_zero_magnitude_identity(self, image_batch):
        assert torch.equal(he_jitter(image_batch, 0.0, 0.0, torch_generator(0, 'jitter')), image_batch)

    def test_near_zero_magnitude_round_trips(self, image_batch):
        out = he_jitter(image_batch, 1e-9, 1e-9, torch_generator(0, 'jitter'))
        torch.testing.assert_close(out, image_batch, atol=1e-4, rtol=0)

    def test_range(self, image_batch):
        out = he_jitter(image_batch, 0.2, 0.05, torch_generator(0, 'jitter'))
        assert out.min() >= -1 and out.max() <= 1
        assert not torch.equal(out, image_batch)

    def test_needs_rgb(self):
        with pytest.raises(ArgumentError):
            he_jitter(torch.zeros(2, 1, 8, 8), 0.1, 0.1, torch_generator(0, 'jitter'))


class TestTrainAugmentation:
    @pytest.mark.parametrize('mode', ['none', 'geometric', 'color_jitter', 'he_jitter'])
    def test_modes_keep_shape(self, mode, image_batch):
        out = train_augmentation(image_batch, mode, make_tiny_config(), torch_generator(0, 'augment'))
        assert out.shape == image_batch.shape

    def test_unknown_mode(self, image_batch):
        with pytest.raises(ArgumentError):
            train_augmentation(image_batch, 'stargan', make_tiny_config(), torch_generator(0, 'augment'))
