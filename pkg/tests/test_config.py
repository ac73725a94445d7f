"""Tests for ConfigManager and RunConfig"""

import pytest
import torch

from memodetector.config_manager import (
    CONFIG_SCHEMA, ConfigManager, RunConfig, parse_seeds, parse_steps, validate_values,
)
from memodetector.enhancer import EnhancementStep
from memodetector.errors import ConfigError
from memodetector.fusion import FusionVariant


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "memodetector.conf"
    path.write_text(
        "# test configuration\n"
        "[encoder]\n"
        "variant = toy\n"
        "dim = 16\n"
        "\n"
        "[train]\n"
        "epochs = 7\n"
        'seeds = "3,4"\n'
        "\n"
        "fusion.variant = add\n"
    )
    return path


class TestConfigManager:
    def test_defaults_without_file(self):
        config = ConfigManager()
        assert config.get("encoder.variant") == "toy"
        assert config.get("train.epochs") == 30
        assert config.get("fusion.variant") == "bidirectional_xattn"

    def test_loads_sections(self, config_file):
        config = ConfigManager(config_file)
        assert config.get("encoder.dim") == 16
        assert config.get("train.epochs") == 7
        assert config.get("train.seeds") == "3,4"

    def test_dotted_key_inside_section(self, config_file):
        assert ConfigManager(config_file).get("fusion.variant") == "add"

    def test_overrides_beat_file(self, config_file):
        config = ConfigManager(config_file)
        config.set_overrides({"train.epochs": "9", "encoder.dim": None})
        assert config.get("train.epochs") == 9
        assert config.get("encoder.dim") == 16

    def test_unknown_key_reports_line(self, tmp_path):
        path = tmp_path / "bad.conf"
        path.write_text("[train]\nepochs = 3\nbogus = 1\n")
        with pytest.raises(ConfigError, match="line 3"):
            ConfigManager(path)

    def test_line_without_equals(self, tmp_path):
        path = tmp_path / "bad.conf"
        path.write_text("[train]\nepochs\n")
        with pytest.raises(ConfigError, match="line 2"):
            ConfigManager(path)

    def test_bad_type(self, tmp_path):
        path = tmp_path / "bad.conf"
        path.write_text("[train]\nepochs = many\n")
        with pytest.raises(ConfigError, match="train.epochs"):
            ConfigManager(path)

    def test_boolean_values(self, tmp_path):
        path = tmp_path / "b.conf"
        path.write_text("[encoder]\nfreeze = no\n")
        assert ConfigManager(path).get("encoder.freeze") is False

    def test_unknown_override(self):
        with pytest.raises(ConfigError):
            ConfigManager().set_overrides({"nope.key": 1})

    def test_save_round_trip(self, config_file, tmp_path):
        config = ConfigManager(config_file)
        config.set_overrides({"dataset.name": "my corpus"})
        saved = config.save(tmp_path / "saved" / "copy.conf")
        reloaded = ConfigManager(saved)
        assert reloaded.get_all() == config.get_all()
        assert not list(saved.parent.glob("*.tmp"))

    def test_example_lists_every_key(self):
        example = ConfigManager().example_config()
        for key in CONFIG_SCHEMA:
            assert f"{key.name.split('.', 1)[1]} = " in example
        assert "[encoder]" in example

    def test_example_parses_back(self, tmp_path):
        path = tmp_path / "example.conf"
        path.write_text(ConfigManager().example_config())
        assert ConfigManager(path).get_all() == ConfigManager().get_all()

    def test_to_run_config_lists_issues(self):
        config = ConfigManager()
        config.set_overrides({"train.batch_size": 0, "fusion.variant": "sum"})
        with pytest.raises(ConfigError) as exc:
            config.to_run_config()
        assert "train.batch_size" in str(exc.value)
        assert "fusion.variant" in str(exc.value)


class TestValidation:
    def values(self, **changes):
        values = {key.name: key.default for key in CONFIG_SCHEMA}
        values.update(changes)
        return values

    def test_defaults_are_valid(self):
        assert validate_values(self.values()) == []

    def test_empty_steps_rejected(self):
        issues = validate_values(self.values(**{"fusion.steps": ""}))
        assert any("fusion.steps" in issue for issue in issues)

    def test_direct_cannot_mix(self):
        issues = validate_values(self.values(**{"fusion.steps": "ID,DIRECT"}))
        assert any("DIRECT" in issue for issue in issues)

    def test_direct_alone_is_valid(self):
        assert validate_values(self.values(**{"fusion.steps": "DIRECT"})) == []

    def test_enhance_steps_may_include_direct(self):
        assert validate_values(self.values(**{"enhance.steps": "ID,TM,CIM,CA,DIRECT"})) == []

    def test_heads_must_divide_dim(self):
        issues = validate_values(self.values(**{"fusion.heads": 3}))
        assert any("fusion.heads" in issue for issue in issues)

    def test_empty_seeds(self):
        issues = validate_values(self.values(**{"train.seeds": ""}))
        assert any("train.seeds" in issue for issue in issues)

    def test_bad_ratio(self):
        issues = validate_values(self.values(**{"split.ratio": "8:1"}))
        assert any("8:1" in issue for issue in issues)


class TestRunConfig:
    def test_steps_in_canonical_order(self):
        assert parse_steps("ca,ID, tm") == (EnhancementStep.ID, EnhancementStep.TM, EnhancementStep.CA)

    def test_unknown_step(self):
        with pytest.raises(ConfigError):
            parse_steps("ID,XX")

    def test_seeds(self):
        assert parse_seeds("1, 2,3") == (1, 2, 3)
        with pytest.raises(ConfigError):
            parse_seeds("1,a")

    def test_defaults(self):
        config = RunConfig.defaults()
        assert config.seeds == (1, 2, 3, 4, 5)
        assert config.variant == FusionVariant.BIDIRECTIONAL_XATTN
        assert config.dtype == torch.float32
        assert len(config.steps) == 4

    def test_effective_lr(self):
        config = RunConfig.defaults()
        assert config.effective_lr == pytest.approx(2e-4)
        assert config.replace(encoder_variant="pretrained").effective_lr == pytest.approx(2e-5)
        assert config.replace(train_lr=0.1).effective_lr == 0.1

    def test_effective_d_k(self):
        config = RunConfig.defaults().replace(fusion_heads=4)
        assert config.effective_d_k(32) == 8
        assert config.replace(fusion_d_k=5).effective_d_k(32) == 5

    def test_from_dict_accepts_both_spellings(self):
        config = RunConfig.from_dict({"train.epochs": "3", "encoder_dim": 8})
        assert config.train_epochs == 3
        assert config.encoder_dim == 8

    def test_from_dict_unknown_key(self):
        with pytest.raises(ConfigError):
            RunConfig.from_dict({"train.speed": 1})

    def test_to_dict_round_trip(self):
        config = RunConfig.defaults().replace(**{"fusion.variant": "concat"})
        assert RunConfig.from_dict(config.to_dict()) == config

    def test_hash_ignores_enhancement_and_output(self):
        config = RunConfig.defaults()
        assert config.config_hash() == config.replace(output_dir="elsewhere", enhance_workers=9).config_hash()
        assert config.config_hash() != config.replace(fusion_steps="ID,TM").config_hash()

    def test_cache_path_relative_to_output(self, tmp_path):
        config = RunConfig.defaults().replace(output_dir=str(tmp_path))
        assert config.cache_path == tmp_path / "enhancements.jsonl"
        absolute = tmp_path / "elsewhere.jsonl"
        assert config.replace(enhance_cache=str(absolute)).cache_path == absolute
