#!/usr/bin/env python3
"""
Tests for model presets and training configuration.
"""

import pytest

from config import (
    EntropyConfig,
    ModelConfig,
    StageSpec,
    TrainConfig,
    list_presets,
    load_model_config,
    save_model_config,
)
from constants import (
    CUSTOM_VARIANT_ID,
    MSE_DISTORTION_SCALE,
    UNKNOWN_LAMBDA_INDEX,
    VARIANT_IDS,
    ContextMode,
    FFNKind,
    SpatialKind,
    StageKind,
)
from errors import ConfigurationError


class TestPresets:
    """Shipped YAML presets."""

    def test_every_variant_has_a_preset(self):
        assert set(list_presets()) == set(VARIANT_IDS)

    @pytest.mark.parametrize("name", sorted(VARIANT_IDS))
    def test_preset_loads(self, name):
        config = load_model_config(name)
        assert config.variant_name == name
        assert config.variant_id == VARIANT_IDS[name]
        assert sum(config.group_widths) == config.latent_channels

    def test_hybrid_arrangement(self):
        config = load_model_config("hybrid-m")
        assert [s.kind for s in config.main_stages] == [StageKind.C, StageKind.A, StageKind.A]

    def test_noca_presets_drop_ffn(self):
        assert load_model_config("s2c-conv-noca").ffn_kind is FFNKind.NONE
        assert load_model_config("s2c-attention-noca").ffn_kind is FFNKind.NONE

    def test_unknown_preset(self):
        with pytest.raises(ConfigurationError):
            load_model_config("no-such-variant")

    def test_malformed_yaml(self, tmp_path):
        path = tmp_path / "broken.yaml"
        path.write_text("main_stages: [unclosed\n")
        with pytest.raises(ConfigurationError):
            load_model_config(path)

    def test_unknown_keys(self, tmp_path):
        path = tmp_path / "extra.yaml"
        path.write_text("variant_name: x\nshift_windows: true\n")
        with pytest.raises(ConfigurationError):
            load_model_config(path)

    def test_round_trip(self, tmp_path, tiny_config):
        path = save_model_config(tiny_config, tmp_path / "tiny.yaml")
        assert load_model_config(path) == tiny_config


class TestModelConfig:
    """Validation and derived values of ModelConfig."""

    def test_block_spec_maps_stage_letters(self, tiny_config):
        spec = tiny_config.block_spec(tiny_config.main_stages[1])
        assert spec.spatial_kind is SpatialKind.ATTENTION
        assert spec.heads == 16 // 8

    def test_heads_fall_back_to_one(self, tiny_config):
        assert tiny_config.heads_for(12) == 1

    def test_custom_variant_id(self, tiny_config):
        assert tiny_config.variant_id == CUSTOM_VARIANT_ID

    def test_with_ffn(self, tiny_config):
        swapped = tiny_config.with_ffn("vanilla")
        assert swapped.ffn_kind is FFNKind.VANILLA
        assert swapped.variant_name != tiny_config.variant_name
        assert tiny_config.with_ffn("gated") is tiny_config

    def test_needs_three_stages(self):
        with pytest.raises(ConfigurationError):
            ModelConfig(main_stages=(StageSpec("C", 1, 16),), latent_channels=32,
                        entropy=EntropyConfig(num_channel_groups=1, group_widths=(32,)))

    def test_group_widths_must_partition_latent(self, tiny_config_factory):
        config = tiny_config_factory()
        with pytest.raises(ConfigurationError):
            ModelConfig.from_dict({**config.to_dict(), "latent_channels": 40})

    def test_group_widths_length(self):
        with pytest.raises(ConfigurationError):
            EntropyConfig(num_channel_groups=3, group_widths=(4, 4))

    def test_derived_group_widths(self):
        entropy = EntropyConfig(num_channel_groups=5, group_widths=None)
        widths = entropy.resolve_group_widths(320)
        assert sum(widths) == 320
        assert len(widths) == 5
        assert widths[0] == widths[1]

    def test_context_mode_parsed(self, tiny_config_factory):
        assert tiny_config_factory(context_mode="hyperprior_only").entropy.context_mode is ContextMode.HYPERPRIOR_ONLY

    def test_bad_stage_entry(self):
        with pytest.raises(ConfigurationError):
            StageSpec("X", 1, 16)


class TestTrainConfig:
    """TrainConfig validation and lambda bookkeeping."""

    def test_mse_defaults(self):
        config = TrainConfig()
        assert config.distortion_scale == MSE_DISTORTION_SCALE
        assert config.lambda_index == 4

    def test_msssim_scale(self):
        config = TrainConfig(metric="msssim", lmbda=8)
        assert config.distortion_scale == 1.0
        assert config.lambda_index == 2

    def test_off_ladder_lambda(self):
        assert TrainConfig(lmbda=0.02).lambda_index == UNKNOWN_LAMBDA_INDEX

    @pytest.mark.parametrize("kwargs", [
        {"lmbda": 0},
        {"batch_size": 0},
        {"lr": -1.0},
        {"metric": "psnr"},
        {"metric": "msssim", "patch_size": 128},
        {"prefetch": -1},
    ])
    def test_invalid(self, kwargs):
        with pytest.raises(ConfigurationError):
            TrainConfig(**kwargs)

    def test_dict_round_trip(self):
        config = TrainConfig(lmbda=0.0067, steps=5, cosine_decay=True)
        assert TrainConfig.from_dict(config.to_dict()) == config

    def test_unknown_keys(self):
        with pytest.raises(ConfigurationError):
            TrainConfig.from_dict({"epochs": 3})
