import numpy as np
import pytest
import torch

from domproj.core import DomainIndexError, ShapeError, torch_generator
from domproj.data import Split, generate_synthetic_dg
from domproj.training import TranslationTrainer
from domproj.translation import (
    Generator, MappingNetwork, StyleEncoder, build_translation_model, count_parameters, discriminate, ema_copy,
    encode_style, export_onnx, map_latent, num_trunk_downsamples, sample_latents, translate, translate_latent_guided,
    update_ema,
)
from tests.conftest import make_tiny_config


@pytest.fixture(scope='module')
def model():
    return build_translation_model(make_tiny_config()).eval()


class TestShapes:
    def test_map_latent(self, model):
        z = torch.randn(4, 8)
        assert map_latent(model.mapping, z, 1).shape == (4, 16)
        assert map_latent(model.mapping, z, torch.tensor([0, 1, 2, 0])).shape == (4, 16)

    def test_encode_style(self, model, image_batch):
        assert encode_style(model.style_encoder, image_batch, 2).shape == (5, 16)

    def test_translate_keeps_shape_and_range(self, model, image_batch):
        with torch.no_grad():
            out = translate(model.generator, image_batch, torch.randn(5, 16) * 10)
        assert out.shape == image_batch.shape
        assert out.min() >= -1 and out.max() <= 1

    def test_discriminate(self, model, image_batch):
        with torch.no_grad():
            logits = discriminate(model.discriminator, image_batch, 0)
            bank = model.discriminator(image_batch)
        assert logits.shape == (5,)
        assert bank.shape == (5, 3)
        torch.testing.assert_close(logits, bank[:, 0])

    def test_latents(self):
        z = sample_latents(3, 5, 8, torch_generator(0, 'latent'))
        assert z.shape == (3, 5, 8)

    def test_latent_guided_projection(self, model, image_batch):
        with torch.no_grad():
            outputs = translate_latent_guided(model, image_batch, torch_generator(0, 'latent'))
        assert len(outputs) == 3
        assert all(o.shape == image_batch.shape for o in outputs)


class TestErrors:
    def test_domain_out_of_range(self, model, image_batch):
        with pytest.raises(DomainIndexError):
            map_latent(model.mapping, torch.randn(2, 8), 3)
        with pytest.raises(DomainIndexError):
            discriminate(model.discriminator, image_batch, 5)
        with pytest.raises(DomainIndexError):
            encode_style(model.style_encoder, image_batch, -1)

    def test_style_dim_mismatch(self, model, image_batch):
        with pytest.raises(ShapeError):
            translate(model.generator, image_batch, torch.randn(5, 15))

    def test_style_count_mismatch(self, model, image_batch):
        with pytest.raises(ShapeError):
            translate(model.generator, image_batch, torch.randn(4, 16))

    def test_latent_dim_mismatch(self, model):
        with pytest.raises(ShapeError):
            map_latent(model.mapping, torch.randn(2, 9), 0)

    def test_wrong_resolution(self, model):
        with pytest.raises(ShapeError):
            encode_style(model.style_encoder, torch.zeros(2, 3, 32, 32), 0)

    def test_not_a_batch(self, model):
        with pytest.raises(ShapeError):
            discriminate(model.discriminator, torch.zeros(3, 16, 16), 0)


class TestDeterminism:
    def test_same_seed_same_weights(self):
        a = build_translation_model(make_tiny_config(seed=3))
        b = build_translation_model(make_tiny_config(seed=3))
        c = build_translation_model(make_tiny_config(seed=4))
        for (name, pa), pb in zip(a.state_dict().items(), b.state_dict().values()):
            assert torch.equal(pa, pb), name
        assert not torch.equal(a.generator.from_rgb.weight, c.generator.from_rgb.weight)

    def test_global_rng_untouched(self):
        state = torch.get_rng_state()
        build_translation_model(make_tiny_config())
        assert torch.equal(state, torch.get_rng_state())

    def test_projection_reproducible(self, model, image_batch):
        with torch.no_grad():
            a = translate_latent_guided(model, image_batch, torch_generator(1, 'latent'))
            b = translate_latent_guided(model, image_batch, torch_generator(1, 'latent'))
        for x, y in zip(a, b):
            assert torch.equal(x, y)


class TestArchitecture:
    @pytest.mark.parametrize('resolution', [8, 16, 24, 32, 64, 128])
    def test_trunk_reaches_integral_size(self, resolution):
        repeat = num_trunk_downsamples(resolution)
        assert repeat >= 1
        assert (resolution >> repeat) << repeat == resolution

    @pytest.mark.parametrize('num_domains', [2, 5, 10])
    @pytest.mark.parametrize('resolution', [16, 32, 64])
    def test_mapping_lighter_than_encoder(self, num_domains, resolution):
        mapping = MappingNetwork(16, 64, num_domains, 64)
        encoder = StyleEncoder(resolution, 64, num_domains, 16, 128)
        assert count_parameters(mapping) < count_parameters(encoder)

    def test_ema_update(self):
        net = torch.nn.Linear(3, 2)
        ema = ema_copy(net)
        with torch.no_grad():
            net.weight.add_(1.0)
        update_ema(ema, net, beta=1.0)
        assert not torch.equal(ema.weight, net.weight)
        update_ema(ema, net, beta=0.0)
        assert torch.equal(ema.weight, net.weight)
        assert not ema.weight.requires_grad


def test_onnx_export(tmp_path):
    written = export_onnx(build_translation_model(make_tiny_config()), tmp_path)
    assert all(p.is_file() for p in written)
    assert sorted(p.name for p in written) == ['discriminator.onnx', 'generator.onnx', 'mapping.onnx',
                                              'style_encoder.onnx']
    assert all(p.stat().st_size > 0 for p in written)


def test_onnx_graphs_are_valid(tmp_path):
    onnx = pytest.importorskip('onnx')
    for path in export_onnx(build_translation_model(make_tiny_config()), tmp_path):
        onnx.checker.check_model(str(path))


def perturbed(x, row):
    other = x.clone()
    other[row] = -other[row].flip(-1)
    return other


class TestPerSampleIndependence:
    """Changing one image of a batch only changes that image's output"""

    def assert_only_row_changed(self, a, b, row):
        keep = [i for i in range(a.shape[0]) if i != row]
        torch.testing.assert_close(a[keep], b[keep], rtol=1e-5, atol=1e-6)
        assert not torch.allclose(a[row], b[row])

    def test_encode_style(self, model, image_batch):
        with torch.no_grad():
            self.assert_only_row_changed(encode_style(model.style_encoder, image_batch, 1),
                                         encode_style(model.style_encoder, perturbed(image_batch, 2), 1), 2)

    def test_discriminate(self, model, image_batch):
        with torch.no_grad():
            self.assert_only_row_changed(model.discriminator(image_batch),
                                         model.discriminator(perturbed(image_batch, 0)), 0)
            self.assert_only_row_changed(discriminate(model.discriminator, image_batch, 2),
                                         discriminate(model.discriminator, perturbed(image_batch, 4), 2), 4)

    def test_translate(self, model, image_batch):
        with torch.no_grad():
            s = map_latent(model.mapping, torch.randn(5, 8, generator=torch_generator(0, 'latent')), 0)
            self.assert_only_row_changed(translate(model.generator, image_batch, s),
                                         translate(model.generator, perturbed(image_batch, 3), s), 3)

    def test_translate_style_rows(self, model, image_batch):
        s = torch.randn(5, 16, generator=torch_generator(0, 'latent'))
        other = s.clone()
        other[1] += 5.0
        with torch.no_grad():
            self.assert_only_row_changed(translate(model.generator, image_batch, s),
                                         translate(model.generator, image_batch, other), 1)


class TestDegenerateInputs:
    def test_all_zero_images_are_finite(self, model):
        x = torch.zeros(3, 3, 16, 16)
        with torch.no_grad():
            assert torch.isfinite(encode_style(model.style_encoder, x, 0)).all()
            assert torch.isfinite(model.discriminator(x)).all()
            assert torch.isfinite(translate(model.generator, x, torch.zeros(3, 16))).all()
            assert torch.isfinite(map_latent(model.mapping, torch.zeros(3, 8), 2)).all()

    def test_generator_random_shapes(self):
        rng = np.random.default_rng(42)
        generator = Generator(64, style_dim=8, channels=4, max_channels=16, num_res_blocks=1).eval()
        for _ in range(20):
            n = int(rng.integers(1, 5))
            size = 4 * int(rng.integers(2, 17))
            x = torch.as_tensor(rng.uniform(-1, 1, size=(n, 3, size, size)), dtype=torch.float32)
            s = torch.as_tensor(rng.normal(scale=float(rng.uniform(0.1, 20)), size=(n, 8)), dtype=torch.float32)
            with torch.no_grad():
                out = translate(generator, x, s)
            assert out.shape == x.shape
            assert torch.isfinite(out).all()
            assert out.abs().max() <= 1


@pytest.fixture(scope='module')
def trained():
    bundle = generate_synthetic_dg(24, 3, 2, seed=0, num_classes=2, resolution=16).merged()
    cfg = make_tiny_config(translation_steps=800, log_every=200, checkpoint_every=10 ** 6)
    trainer = TranslationTrainer(cfg, bundle)
    trainer.train()
    return trainer.model.eval(), bundle[Split.ID_VAL]


@pytest.mark.slow
class TestTrainedToy:
    def test_real_scores_above_translated_on_held_out(self, trained):
        model, held_out = trained
        gaps = []
        with torch.no_grad():
            for d in range(3):
                real = held_out.images[held_out.domains == d]
                others = held_out.images[held_out.domains != d]
                z = torch.randn(len(others), 8, generator=torch_generator(d, 'latent'))
                fake = translate(model.generator, others, map_latent(model.mapping, z, d))
                gaps.append(discriminate(model.discriminator, real, d).mean() - discriminate(model.discriminator,
                                                                                            fake, d).mean())
        assert torch.stack(gaps).mean() > 0

    def test_domains_give_distinct_translations(self, trained):
        model, held_out = trained
        x = held_out.images[:16]
        with torch.no_grad():
            outputs = translate_latent_guided(model, x, torch_generator(0, 'latent'))
        for i in range(3):
            for j in range(i + 1, 3):
                assert (outputs[i] - outputs[j]).abs().mean() > 1e-2

    def test_mapping_gives_distinct_styles(self, trained):
        model, _ = trained
        z = torch.randn(32, 8, generator=torch_generator(0, 'latent'))
        with torch.no_grad():
            styles = [map_latent(model.mapping, z, d) for d in range(3)]
        for i in range(3):
            for j in range(i + 1, 3):
                assert (styles[i] - styles[j]).abs().mean() > 1e-3
