import math

import pytest
import torch

from domproj.core import CheckpointNotFoundError, ValidationError
from domproj.data import DomainDataset, Split
from domproj.storage import RunStore, load_checkpoint
from domproj.training import (
    ClassifierTrainer, SmallResNet, TranslationTrainer, build_classifier, load_classifier, load_translation_model,
    train_classifier, train_translation,
)
from domproj.translation import build_translation_model, count_parameters
from tests.conftest import make_tiny_config


def assert_same_weights(a: torch.nn.Module, b: torch.nn.Module):
    for (name, ta), tb in zip(a.state_dict().items(), b.state_dict().values()):
        assert torch.equal(ta, tb), name


class TestTranslationTraining:
    def test_needs_two_domains(self, tiny_cfg):
        dataset = DomainDataset(torch.zeros(4, 3, 16, 16), torch.tensor([0, 1, 0, 1]), torch.zeros(4, dtype=torch.long),
                                Split.TRAIN, ['a', 'b'], ['only'])
        with pytest.raises(ValidationError):
            TranslationTrainer(tiny_cfg, dataset)

    def test_domain_index_must_fit_config(self, tiny_bundle):
        with pytest.raises(ValidationError):
            TranslationTrainer(make_tiny_config(num_domains=2), tiny_bundle)

    def test_losses_logged_and_finite(self, tmp_path, tiny_cfg, tiny_bundle):
        store = RunStore(tmp_path, 'run').open(tiny_cfg, 'train-translation')
        trainer = TranslationTrainer(tiny_cfg, tiny_bundle, store)
        checkpoint = trainer.train()
        assert checkpoint.step == 4
        assert [row['step'] for row in trainer.loss_rows] == [2, 4]
        for row in trainer.loss_rows:
            assert all(math.isfinite(v) for v in row.values())
            assert row['gp'] >= 0
        assert [p.name for p in sorted((tmp_path / 'run' / 'translation').iterdir())] == ['step_2', 'step_4']
        assert len(store.get_loss_log()) == 2

    def test_logged_row_is_mean_of_steps(self, tiny_cfg, tiny_bundle):
        stepped = TranslationTrainer(tiny_cfg, tiny_bundle)
        steps = [stepped.train_step().as_row() for _ in range(2)]
        logged = TranslationTrainer(tiny_cfg, tiny_bundle)
        logged.train(2)
        row = logged.loss_rows[0]
        for key in steps[0]:
            assert row[key] == pytest.approx((steps[0][key] + steps[1][key]) / 2, rel=1e-12, abs=1e-12)

    def test_deterministic(self, tiny_cfg, tiny_bundle):
        a = TranslationTrainer(tiny_cfg, tiny_bundle)
        a.train(2)
        b = TranslationTrainer(tiny_cfg, tiny_bundle)
        b.train(2)
        assert a.loss_rows == b.loss_rows
        assert_same_weights(a.model, b.model)

    def test_resume_matches_uninterrupted(self, tmp_path, tiny_cfg, tiny_bundle):
        straight = TranslationTrainer(tiny_cfg, tiny_bundle)
        straight.train(4)

        store = RunStore(tmp_path, 'run').open(tiny_cfg, 'train-translation')
        train_translation(tiny_cfg, tiny_bundle, store, steps=2)
        resumed = TranslationTrainer(tiny_cfg, tiny_bundle, store)
        resumed.restore(load_checkpoint(store.checkpoint_dir('translation', 2), tiny_cfg, 'translation'))
        resumed.train(4)

        assert_same_weights(straight.model, resumed.model)
        for name, ema in straight.ema.items():
            assert_same_weights(ema, resumed.ema[name])

    def test_in_memory_checkpoint_is_a_snapshot(self, tiny_cfg, tiny_bundle):
        trainer = TranslationTrainer(tiny_cfg, tiny_bundle)
        trainer.train_step()
        checkpoint = trainer.checkpoint()
        before = checkpoint.modules['generator']['from_rgb.weight'].clone()
        trainer.train_step()
        assert torch.equal(checkpoint.modules['generator']['from_rgb.weight'], before)

    def test_load_uses_ema(self, tiny_cfg, tiny_bundle):
        trainer = TranslationTrainer(tiny_cfg, tiny_bundle)
        checkpoint = trainer.train(2)
        model = load_translation_model(tiny_cfg, checkpoint)
        assert_same_weights(model.generator, trainer.ema['generator'])
        raw = load_translation_model(tiny_cfg, checkpoint, use_ema=False)
        assert_same_weights(raw.generator, trainer.model.generator)
        assert not any(p.requires_grad for p in model.parameters())


class TestClassifierTraining:
    def test_default_size(self):
        assert 5e5 < count_parameters(SmallResNet(2)) < 2e6

    def test_stargan_needs_translation(self, tiny_cfg, tiny_bundle):
        with pytest.raises(CheckpointNotFoundError):
            ClassifierTrainer(tiny_cfg, tiny_bundle, 'stargan')

    def test_unknown_mode(self, tiny_cfg, tiny_bundle):
        with pytest.raises(ValidationError):
            ClassifierTrainer(tiny_cfg, tiny_bundle, 'mixup')

    def test_zero_probability_stargan_equals_plain(self, tiny_bundle):
        cfg = make_tiny_config(p_aug=0.0)
        plain = ClassifierTrainer(cfg, tiny_bundle, 'none')
        plain.train()
        stargan = ClassifierTrainer(cfg, tiny_bundle, 'stargan', build_translation_model(cfg))
        stargan.train()
        assert_same_weights(plain.model, stargan.model)

    def test_translate_batch_keeps_labels_and_range(self, tiny_bundle):
        cfg = make_tiny_config(p_aug=1.0)
        trainer = ClassifierTrainer(cfg, tiny_bundle, 'stargan', build_translation_model(cfg))
        x = tiny_bundle[Split.TRAIN].images[:6]
        labels = tiny_bundle[Split.TRAIN].labels.clone()
        out = trainer.translate_batch(x)
        assert out.shape == x.shape
        assert out.min() >= -1 and out.max() <= 1
        assert not torch.equal(out, x)
        assert torch.equal(tiny_bundle[Split.TRAIN].labels, labels)

    def test_partial_replacement(self, tiny_bundle):
        cfg = make_tiny_config(p_aug=0.5)
        trainer = ClassifierTrainer(cfg, tiny_bundle, 'stargan', build_translation_model(cfg))
        x = tiny_bundle[Split.TRAIN].images[:16]
        out = trainer.translate_batch(x)
        kept = [torch.equal(a, b) for a, b in zip(out, x)]
        assert 0 < sum(kept) < 16

    @pytest.mark.parametrize('mode', ['geometric', 'color_jitter', 'he_jitter'])
    def test_classic_modes_train(self, mode, tiny_cfg, tiny_bundle):
        checkpoint = train_classifier(tiny_cfg, tiny_bundle, mode, steps=2)
        assert checkpoint.trainer_state['augmentation_mode'] == mode

    def test_resume_matches_uninterrupted(self, tmp_path, tiny_cfg, tiny_bundle):
        straight = ClassifierTrainer(tiny_cfg, tiny_bundle, 'geometric')
        straight.train(4)

        store = RunStore(tmp_path, 'run').open(tiny_cfg, 'train-classifier')
        train_classifier(tiny_cfg, tiny_bundle, 'geometric', store=store, steps=2)
        checkpoint = train_classifier(tiny_cfg, tiny_bundle, 'geometric', store=store,
                                      resume=store.checkpoint_dir('classifier', 2), steps=4)
        resumed = load_classifier(tiny_cfg, checkpoint)
        assert_same_weights(straight.model, resumed)

    def test_build_is_seeded(self, tiny_cfg):
        assert_same_weights(build_classifier(tiny_cfg), build_classifier(tiny_cfg))


@pytest.mark.slow
class TestLearning:
    def test_classifier_fits_synthetic_classes(self, tiny_bundle):
        cfg = make_tiny_config(classifier_steps=150, classifier_lr=1e-3)
        trainer = ClassifierTrainer(cfg, tiny_bundle, 'none')
        trainer.train()
        train = tiny_bundle[Split.TRAIN]
        with torch.no_grad():
            accuracy = (trainer.model.eval()(train.images).argmax(1) == train.labels).float().mean().item()
        assert accuracy > 0.95

    def test_translation_cycle_loss_decreases(self, tiny_bundle):
        cfg = make_tiny_config(translation_steps=200, log_every=20, checkpoint_every=1000)
        trainer = TranslationTrainer(cfg, tiny_bundle)
        trainer.train()
        assert trainer.loss_rows[-1]['cyc'] < trainer.loss_rows[0]['cyc']
