"""Tests for the experiment config schema and flat file format."""

from pathlib import Path

import pytest

from src.core.config import (
    config_from_text,
    config_hash,
    dump_config,
    load_config,
    parse_overrides,
    render_config,
    unflatten,
    with_overrides,
)
from src.core.errors import ConfigError, DataError, OutputExistsError, TalError, exit_code_for
from tests.conftest import TINY_OVERRIDES

CONFIG_DIR = Path(__file__).resolve().parent.parent / "configs"


class TestLoadConfig:
    """Test suite for loading and validating configs."""

    @pytest.mark.parametrize("name", ["default.env", "smoke.env"])
    def test_shipped_configs_validate(self, name):
        """Test the bundled configs are valid."""
        config = load_config(CONFIG_DIR / name)

        assert config.train.margin > 0
        assert config.sampler.num_identities * config.sampler.num_instances == config.sampler.batch_size

    def test_default_config_values(self):
        """Test the desk-scale defaults."""
        config = load_config(CONFIG_DIR / "default.env")

        assert (config.backbone.height, config.backbone.width) == (96, 32)
        assert config.backbone.channels == [16, 64]
        assert config.matching.scales == [0, 1]
        assert config.matching.score_scale == 16.0
        assert config.train.margin == 16.0
        assert config.train.loss_reduction == "mean"
        assert config.train.phase_steps == [1, 1, 2]
        assert config.train.iters_per_epoch == 16
        assert config.data.synthetic.min_domain_gap == 4.0
        assert config.evaluation.fusion == "sum"
        assert config.evaluation.ranks == [1, 5, 10]

    def test_file_and_overrides(self, tmp_path):
        """Test overrides replace file values regardless of key case."""
        path = tmp_path / "exp.env"
        path.write_text(
            "# comment\nTRAIN__MARGIN=2.5\nBACKBONE__CHANNELS=8,16,32\nBACKBONE__STRIDES=2,2,1\n"
            "BACKBONE__CONVS_PER_STAGE=1,1,1\nMATCHING__SCALES=1,2\n"
        )

        config = load_config(path, {"train__epochs": "3", "TRAIN__DECAY_EPOCH": "2"})

        assert config.train.margin == 2.5
        assert config.train.epochs == 3
        assert config.backbone.channels == [8, 16, 32]
        assert config.matching.scales == [1, 2]

    def test_margin_is_required(self):
        """Test a config without a margin is rejected."""
        with pytest.raises(ConfigError, match="margin"):
            load_config(None, {"TRAIN__EPOCHS": "3", "TRAIN__DECAY_EPOCH": "2"})

    def test_unknown_key(self):
        """Test misspelled keys fail instead of being ignored."""
        with pytest.raises(ConfigError, match="Extra inputs"):
            load_config(None, {"TRAIN__MARGIN": "1", "TRAIN__MARGN": "2"})

    def test_missing_file(self, tmp_path):
        """Test a config path that does not exist."""
        with pytest.raises(ConfigError, match="not found"):
            load_config(tmp_path / "absent.env")

    @pytest.mark.parametrize(
        "overrides",
        [
            {"SAMPLER__BATCH_SIZE": "30"},
            {"MATCHING__SCALES": "0,5"},
            {"BACKBONE__NORM_MODE": "per-domain"},
            {"BACKBONE__NORM_MODE": "groupnorm"},
            {"TRAIN__PHASE_STEPS": "1,1"},
            {"TRAIN__DECAY_EPOCH": "30", "TRAIN__EPOCHS": "10"},
            {"VERSION": "2"},
            {"BACKBONE__CHANNELS": "16"},
            {"DATA__SYNTHETIC__HUE_SHIFTS": "0,1"},
        ],
    )
    def test_invalid_values(self, overrides):
        """Test cross-field and range validation."""
        with pytest.raises(ConfigError):
            load_config(None, {**TINY_OVERRIDES, **overrides})

    def test_per_domain_with_ds_fusion(self):
        """Test per-domain normalization is allowed with DS-only fusion."""
        config = load_config(
            None, {**TINY_OVERRIDES, "BACKBONE__NORM_MODE": "per-domain", "EVALUATION__FUSION": "ds"}
        )

        assert config.backbone.norm_mode == "per-domain"

    def test_stage_shapes(self, config):
        """Test stage output sizes for 3x3 convolutions with padding 1."""
        assert config.backbone.stage_shapes() == [(4, 4, 2), (8, 2, 1)]


class TestFlatFormat:
    """Test suite for rendering and parsing the flat format."""

    def test_render_and_reparse(self, config):
        """Test a rendered config validates back to an equal config."""
        text = render_config(config)

        assert "TRAIN__MARGIN=1.0\n" in text
        assert "BACKBONE__CHANNELS=4,8\n" in text
        assert config_from_text(text) == config
        assert config_hash(config_from_text(text)) == config_hash(config)

    def test_dump(self, config, tmp_path):
        """Test the dumped file loads back."""
        path = dump_config(config, tmp_path / "run" / "effective_config.env")

        assert load_config(path) == config

    def test_hash_tracks_values(self, config):
        """Test any value change alters the hash."""
        changed = with_overrides(config, {"TRAIN__MARGIN": "2.0"})

        assert changed.train.margin == 2.0
        assert config_hash(changed) != config_hash(config)

    def test_unflatten(self):
        """Test nesting by double underscores and blank values being skipped."""
        nested = unflatten({"A__B__C": "1", "A__D": "2", "E": "", "f": "3"})

        assert nested == {"a": {"b": {"c": "1"}, "d": "2"}, "f": "3"}

    def test_unflatten_conflict(self):
        """Test a key used both as a value and as a section."""
        with pytest.raises(ConfigError):
            unflatten({"TRAIN": "1", "TRAIN__MARGIN": "2"})

    def test_parse_overrides(self):
        """Test command-line KEY=VALUE parsing."""
        assert parse_overrides(["A=1", " B__C = x,y "]) == {"A": "1", "B__C": "x,y"}
        with pytest.raises(ConfigError):
            parse_overrides(["novalue"])


class TestErrors:
    """Test suite for exit code mapping."""

    def test_exit_codes(self):
        """Test each error family maps to its exit code."""
        assert exit_code_for(ConfigError("x")) == 1
        assert exit_code_for(OutputExistsError("x")) == 1
        assert exit_code_for(DataError("x")) == 2
        assert exit_code_for(TalError("x")) == 3
        assert exit_code_for(RuntimeError("x")) == 3
