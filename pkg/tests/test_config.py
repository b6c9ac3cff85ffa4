"""
Tests for configuration models, config files and source precedence.
"""

import json

import pytest
from pydantic import ValidationError

from gleason.annotation import GleasonClass
from gleason.config import (
    BalanceSpec,
    ChannelStats,
    ColorMap,
    PipelineConfig,
    SplitSpec,
    load_config_file,
    resolve_config,
)
from gleason.errors import ConfigError, InvalidBalanceSpecError, InvalidSplitSpecError


class TestDefaults:
    """Default values of the pipeline configuration."""

    def test_reference_defaults(self):
        config = PipelineConfig()
        assert config.tile_size_px == 1024
        assert config.input_side == 224
        assert config.tissue_threshold == 0.5
        assert config.artefact_threshold == 0.9
        assert config.split.ratios == (0.62, 0.15, 0.23)
        assert config.backend.batch_size == 28
        assert config.color_map.alpha == 0.35
        assert config.artefact_mode == "exclude"
        assert config.fine_scope == "malignant"

    def test_default_balance_is_sponge(self):
        (balance,) = PipelineConfig().balance
        assert balance.target_class is GleasonClass.ARTEFACT_SPONGE
        assert balance.target_fraction == 0.04
        assert balance.applies_to == ("train", "val")

    def test_validate_assignment(self):
        config = PipelineConfig()
        with pytest.raises(ValidationError):
            config.workers = 0


class TestSpecModels:
    """Validation of the nested models."""

    def test_split_must_sum_to_one(self):
        with pytest.raises(InvalidSplitSpecError):
            SplitSpec(ratios=(0.5, 0.3, 0.3))
        with pytest.raises(InvalidSplitSpecError):
            SplitSpec(ratios=(1.2, -0.1, -0.1))

    def test_nested_split(self):
        spec = SplitSpec.nested(0.23, 0.2, seed=7)
        assert spec.ratios == pytest.approx((0.616, 0.154, 0.23))
        assert spec.seed == 7

    def test_balance_accepts_short_names(self):
        assert BalanceSpec(target="g3").target_class is GleasonClass.GLEASON3
        assert BalanceSpec(target="sponge").target_class is GleasonClass.ARTEFACT_SPONGE

    @pytest.mark.parametrize("fraction", [0.0, 1.0, -0.1])
    def test_balance_fraction_open_interval(self, fraction):
        with pytest.raises(InvalidBalanceSpecError):
            BalanceSpec(target_fraction=fraction)

    def test_balance_rejects_questionable_and_unknown_splits(self):
        with pytest.raises(InvalidBalanceSpecError):
            BalanceSpec(target=GleasonClass.QUESTIONABLE)
        with pytest.raises(InvalidBalanceSpecError):
            BalanceSpec(applies_to=("holdout",))

    def test_color_map_partial_override(self):
        cmap = ColorMap(colors={"Gleason4": (1, 1, 1)})
        assert cmap.color_for(GleasonClass.GLEASON4) == (1, 1, 1)
        assert cmap.color_for(GleasonClass.GLEASON5) == (220, 0, 0)

    def test_color_map_alpha_range(self):
        with pytest.raises(ConfigError):
            ColorMap(alpha=1.2)

    def test_channel_stats(self):
        assert ChannelStats(std=(0.1, 0.0, 0.1)).is_degenerate()
        with pytest.raises(ConfigError):
            ChannelStats(std=(0.1, -0.1, 0.1))
        with pytest.raises(ConfigError):
            ChannelStats(mean=(float("nan"), 0.0, 0.0))

    def test_normalization_must_be_rgb(self):
        with pytest.raises(ConfigError):
            PipelineConfig(normalization=ChannelStats(space="lab"))


class TestConfigFile:
    """Tests for load_config_file."""

    def test_toml(self, tmp_path):
        path = tmp_path / "gleason.toml"
        path.write_text(
            "tile_size_px = 512\n"
            "workers = 3\n"
            "\n"
            "[color_map]\n"
            "alpha = 0.4\n"
            "\n"
            "[backend]\n"
            'kind = "remote"\n'
            'locator = "http://localhost:8080"\n'
            "\n"
            "[[balance]]\n"
            'target = "g3"\n'
            "target_fraction = 0.1\n"
            'applies_to = ["train"]\n'
        )
        config = resolve_config(load_config_file(path))

        assert config.tile_size_px == 512
        assert config.workers == 3
        assert config.color_map.alpha == 0.4
        assert config.backend.kind == "remote"
        assert config.balance[0].target_class is GleasonClass.GLEASON3
        assert config.balance[0].applies_to == ("train",)

    def test_json(self, tmp_path):
        path = tmp_path / "gleason.json"
        path.write_text(json.dumps({"split": {"ratios": [0.7, 0.1, 0.2], "seed": 9}}))
        config = resolve_config(load_config_file(path))
        assert config.split.ratios == (0.7, 0.1, 0.2)
        assert config.split.seed == 9

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config_file(tmp_path / "absent.toml")

    def test_unsupported_suffix(self, tmp_path):
        path = tmp_path / "gleason.yaml"
        path.write_text("tile_size_px: 512\n")
        with pytest.raises(ConfigError):
            load_config_file(path)

    def test_unparsable(self, tmp_path):
        path = tmp_path / "broken.toml"
        path.write_text("tile_size_px = \n")
        with pytest.raises(ConfigError):
            load_config_file(path)

    def test_top_level_must_be_table(self, tmp_path):
        path = tmp_path / "list.json"
        path.write_text("[1, 2]")
        with pytest.raises(ConfigError):
            load_config_file(path)


class TestResolveConfig:
    """Precedence: command-line flag > config file > default."""

    def setup_method(self):
        self.file_values = {"color_map": {"alpha": 0.5, "threshold": 0.2}, "workers": 2}

    def test_default_only(self):
        assert resolve_config().color_map.alpha == 0.35

    def test_file_over_default(self):
        config = resolve_config(self.file_values)
        assert config.color_map.alpha == 0.5
        assert config.workers == 2

    def test_flag_over_file(self):
        config = resolve_config(self.file_values, {"color_map.alpha": 0.7, "workers": 8})
        assert config.color_map.alpha == 0.7
        assert config.workers == 8
        # sibling keys from the file survive
        assert config.color_map.threshold == 0.2

    def test_unset_flag_keeps_file_value(self):
        config = resolve_config(self.file_values, {"color_map.alpha": None})
        assert config.color_map.alpha == 0.5

    def test_flag_over_default(self):
        config = resolve_config(None, {"backend.batch_size": 64})
        assert config.backend.batch_size == 64
        assert config.backend.kind == "lookup"

    def test_file_values_not_mutated(self):
        resolve_config(self.file_values, {"color_map.alpha": 0.9})
        assert self.file_values["color_map"]["alpha"] == 0.5

    def test_invalid_merged_values(self):
        with pytest.raises(ConfigError):
            resolve_config({"tile_size_px": 0})
        with pytest.raises(ConfigError):
            resolve_config(None, {"split.ratios": (0.5, 0.5, 0.5)})
