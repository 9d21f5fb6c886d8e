import numpy as np
import pytest
import torch

from domproj.core import (
    ArgumentError, ConfigError, DomainIndexError, DomainLabel, EnsembleConfig, EnsembleStrategy, ExperimentConfig,
    ShapeError, ValidationError, check_class_probs, check_domain, component_seed, config_hash, dump_config,
    load_config, parse_config, seed_streams, torch_generator,
)


class TestLoadConfig:
    def test_minimal_file_fills_defaults(self, tmp_path):
        path = tmp_path / 'cfg.yaml'
        path.write_text('num_domains: 3\n')
        cfg = load_config(path)
        assert cfg.num_domains == 3
        for key, value in cfg.loss_weights().items():
            assert value == 1.0, key
        assert cfg.style_dim == 64
        assert cfg.learning_rate == 1e-4
        assert cfg.latent_dim == 16

    def test_negative_weight_rejected(self):
        with pytest.raises(ValidationError) as err:
            parse_config('lambda_cyc: -1\n')
        assert err.value.key == 'lambda_cyc'

    def test_k_larger_than_domains_rejected(self):
        with pytest.raises(ValidationError):
            parse_config('num_domains: 3\nensemble_strategy: top_k\nensemble_k: 5\n')

    def test_unknown_key_names_the_key(self):
        with pytest.raises(ConfigError) as err:
            parse_config('num_domain: 3\n')
        assert err.value.key == 'num_domain'

    def test_wrong_type(self):
        with pytest.raises(ConfigError) as err:
            parse_config('style_dim: big\n')
        assert err.value.key == 'style_dim'

    def test_bool_is_not_an_int(self):
        with pytest.raises(ConfigError):
            parse_config('num_domains: true\n')

    def test_nested_values_rejected(self):
        with pytest.raises(ConfigError):
            parse_config('num_domains:\n  value: 3\n')

    def test_invalid_yaml(self):
        with pytest.raises(ConfigError):
            parse_config('num_domains: [3\n')

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / 'absent.yaml')

    def test_resolution_multiple_of_eight(self):
        with pytest.raises(ValidationError):
            ExperimentConfig(image_resolution=60)

    def test_round_trip(self):
        cfg = ExperimentConfig(num_domains=4, ensemble_strategy='weighted', ensemble_temperature=0.5, seed=7,
                               train_dir='data/x', ds_decay=True)
        assert parse_config(dump_config(cfg)) == cfg

    def test_empty_file_is_default(self):
        assert parse_config('') == ExperimentConfig()


class TestEnsembleConfig:
    def test_top_k_needs_k(self):
        with pytest.raises(ValidationError):
            EnsembleConfig(EnsembleStrategy.TOP_K)

    def test_k_only_for_top_k(self):
        with pytest.raises(ValidationError):
            EnsembleConfig(EnsembleStrategy.NAIVE, k=2)

    def test_temperature_only_for_weighted(self):
        with pytest.raises(ValidationError):
            EnsembleConfig(EnsembleStrategy.TOP_K, k=1, temperature=1.0)

    @pytest.mark.parametrize('temperature', [0.0, -1.0, float('inf')])
    def test_temperature_must_be_positive_finite(self, temperature):
        with pytest.raises(ValidationError):
            EnsembleConfig(EnsembleStrategy.WEIGHTED, temperature=temperature)

    def test_strategy_from_string(self):
        assert EnsembleConfig('weighted', temperature=2.0).strategy is EnsembleStrategy.WEIGHTED

    def test_tags(self):
        assert EnsembleConfig().tag == 'tta_naive'
        assert EnsembleConfig('top_k', k=2).tag == 'tta_top_k2'
        assert EnsembleConfig('weighted', temperature=0.5).tag == 'tta_weighted_T0.5'


class TestDomainLabel:
    def test_valid(self):
        assert int(DomainLabel(2, 3)) == 2

    def test_index_out_of_range(self):
        with pytest.raises(DomainIndexError):
            DomainLabel(3, 3)

    def test_needs_two_domains(self):
        with pytest.raises(ValidationError):
            DomainLabel(0, 1)


class TestSeeds:
    def test_streams_deterministic_and_distinct(self):
        a, b = seed_streams(11), seed_streams(11)
        assert a == b
        assert len(set(a.values())) == len(a)
        assert seed_streams(12) != a

    def test_unknown_component(self):
        with pytest.raises(ArgumentError):
            component_seed(0, 'dropout')

    def test_torch_generator_reproducible(self):
        x = torch.randn(5, generator=torch_generator(3, 'latent'))
        y = torch.randn(5, generator=torch_generator(3, 'latent'))
        z = torch.randn(5, generator=torch_generator(3, 'data'))
        assert torch.equal(x, y)
        assert not torch.equal(x, z)


class TestConfigHash:
    def test_architecture_change_changes_hash(self):
        cfg = ExperimentConfig()
        assert config_hash(cfg) != config_hash(cfg.replace(style_dim=32))

    def test_budget_change_keeps_hash(self):
        cfg = ExperimentConfig()
        assert config_hash(cfg) == config_hash(cfg.replace(translation_steps=10, seed=5))


class TestValidators:
    def test_check_domain_int_and_tensor(self):
        assert check_domain(1, 3, 4).tolist() == [1, 1, 1, 1]
        assert check_domain(torch.tensor([0, 2]), 3, 2).tolist() == [0, 2]

    def test_check_domain_errors(self):
        with pytest.raises(DomainIndexError):
            check_domain(3, 3, 2)
        with pytest.raises(DomainIndexError):
            check_domain(torch.tensor([0, -1]), 3, 2)
        with pytest.raises(ShapeError):
            check_domain(torch.tensor([0, 1, 2]), 3, 2)

    def test_class_probs(self):
        check_class_probs(np.array([0.25, 0.75]))
        with pytest.raises(ArgumentError):
            check_class_probs(np.array([0.5, 0.6]))
        with pytest.raises(ArgumentError):
            check_class_probs(np.array([-0.5, 1.5]))
