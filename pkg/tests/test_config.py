"""Layered run configuration: defaults, INI files, dotted overrides."""

import pytest

from udaseg.config import load_config, resolved_text, write_resolved
from udaseg.errors import ConfigError

INI = """\
[data]
image_size = 32
n_source = 4
n_target = 4
slices_per_subject = 3
seed = 9

[train]
variant = w/o LSAF
epochs = 3
batch_size = 2

[weights]
stage_switch_epoch = 2
"""


class TestLoadConfig:
    def test_defaults_are_consistent(self):
        cfg = load_config()
        assert cfg.variant_name == "Proposed"
        assert cfg.models.image_size == cfg.data.image_size
        assert cfg.train.variant.use_lsaf
        assert cfg.train.weights.seg_u3_stage2 == 5.0
        assert cfg.train.weights.stage_switch_epoch == 70
        assert cfg.pretrain.lr == pytest.approx(1e-3)

    def test_ini_file_overlays_defaults(self, tmp_path):
        path = tmp_path / "run.ini"
        path.write_text(INI)
        cfg = load_config(str(path))
        assert cfg.data.image_size == 32
        assert cfg.data.seed == 9
        assert cfg.models.image_size == 32  # follows the data by default
        assert cfg.train.epochs == 3
        assert cfg.train.batch_size == 2
        assert cfg.variant_name == "w/o LSAF"
        assert not cfg.train.variant.use_lsaf
        assert cfg.train.weights.stage_switch_epoch == 2

    def test_overrides_beat_file(self, tmp_path):
        path = tmp_path / "run.ini"
        path.write_text(INI)
        cfg = load_config(str(path), ["train.epochs=5", "data.seed=1"])
        assert cfg.train.epochs == 5
        assert cfg.data.seed == 1
        assert cfg.data.image_size == 32  # untouched file value survives

    def test_typed_parsing(self):
        cfg = load_config(None, [
            "train.pamr_squared=false",
            "train.pamr_dilations=1,2",
            "data.source_levels=0.1, 0.2, 0.3, 0.4",
            "train.lr_u3=2e-4",
        ])
        assert cfg.train.pamr_squared is False
        assert cfg.train.pamr_dilations == (1, 2)
        assert cfg.data.source_levels == (0.1, 0.2, 0.3, 0.4)
        assert cfg.train.lr_u3 == pytest.approx(2e-4)

    def test_variant_resolution(self):
        cfg = load_config(None, ["train.variant=ISIM"])
        assert cfg.variant_name == "ISIM"
        assert cfg.train.variant.adv_stem
        assert not cfg.train.variant.use_u3

    def test_unknown_variant_rejected(self):
        with pytest.raises(ConfigError):
            load_config(None, ["train.variant=Bogus"])

    def test_unknown_section_rejected(self, tmp_path):
        path = tmp_path / "run.ini"
        path.write_text("[nonsense]\nx = 1\n")
        with pytest.raises(ConfigError):
            load_config(str(path))
        with pytest.raises(ConfigError):
            load_config(None, ["nonsense.x=1"])

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError):
            load_config(None, ["train.nonsense=1"])

    def test_malformed_override_rejected(self):
        with pytest.raises(ConfigError):
            load_config(None, ["train.epochs"])
        with pytest.raises(ConfigError):
            load_config(None, ["epochs=3"])

    def test_bad_value_type_rejected(self):
        with pytest.raises(ConfigError):
            load_config(None, ["train.epochs=soon"])
        with pytest.raises(ConfigError):
            load_config(None, ["train.pamr_squared=perhaps"])

    def test_explicit_size_mismatch_rejected(self):
        with pytest.raises(ConfigError):
            load_config(None, ["data.image_size=64",
                               "models.image_size=128"])


class TestResolvedConfig:
    def test_round_trip(self, tmp_path):
        cfg = load_config(None, [
            "data.image_size=32", "train.variant=w/o PAMR",
            "train.epochs=7", "weights.entropy=2.5",
        ])
        path = tmp_path / "resolved.ini"
        write_resolved(cfg, str(path))
        back = load_config(str(path))
        assert back == cfg
        assert resolved_text(back) == resolved_text(cfg)

    def test_resolved_text_names_variant(self):
        cfg = load_config(None, ["train.variant=SEA"])
        text = resolved_text(cfg)
        assert "variant = SEA" in text
        assert "[weights]" in text and "[models]" in text
